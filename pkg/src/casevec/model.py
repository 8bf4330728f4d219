"""Bottlenecked encoder with two shallow section decoders.

A deep post-LN transformer encodes the masked fact; the final [CLS] state
h_F is the document vector. Each decoder sees [h_F, token embeddings +
decoder position embeddings] with full bidirectional self-attention and
predicts the masked tokens of its section, so the only path from fact
content to decoder logits is h_F. Pre-training optimizes the unweighted
sum of the three masked-token losses; retrieval uses raw dot products
between unmasked [CLS] vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from typing import Optional, Sequence

import numpy as np

from .masking import MaskedExample, derive_rng
from .numerics import autograd as ag
from .numerics.autograd import Tensor
from .numerics.serialize import load_checkpoint, save_checkpoint
from .textproc import CLS

REASONING = "reasoning"
DECISION = "decision"

_STACKS = {REASONING: "rea", DECISION: "dcd"}


class SequenceTooLong(ValueError):
    """Input exceeds max_len once the leading vector slot is added."""


class NoMaskedPositions(ValueError):
    """A masked-token loss was requested for an example with no masks."""


class EmptyInput(ValueError):
    """embed() needs at least one token."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_encoder_layers: int = 4
    n_decoder_layers: int = 1
    d_ff: int = 512
    max_len: int = 256
    dropout: float = 0.0
    tie_output_embeddings: bool = True
    reasoning_decoder: bool = True
    decision_decoder: bool = True
    shared_decoder: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_decoder_layers < 1:
            raise ValueError("n_decoder_layers must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


@dataclass
class LossBreakdown:
    l_mlm: float
    l_rea: float
    l_dec: float
    l_total: float
    skipped_reasoning: int = 0
    skipped_decision: int = 0


@dataclass
class PretrainExample:
    """Masked sections of one document, as consumed by loss_total."""

    fact: MaskedExample
    reasoning: Optional[MaskedExample] = None
    decision: Optional[MaskedExample] = None


def _layer_param_names(prefix: str, i: int) -> list[str]:
    base = f"{prefix}.{i}"
    names = []
    for part in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
        names.append(f"{base}.attn.{part}")
    names += [f"{base}.ln1.g", f"{base}.ln1.b"]
    for part in ("w1", "b1", "w2", "b2"):
        names.append(f"{base}.ffn.{part}")
    names += [f"{base}.ln2.g", f"{base}.ln2.b"]
    return names


class StructuredCaseEncoder:
    """Encoder plus optional section decoders over one shared token table."""

    def __init__(self, config: ModelConfig, seed: int = 0, init: bool = True):
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        if init:
            self._init_params()

    # -- parameters -----------------------------------------------------

    def _param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        shapes: dict[str, tuple[int, ...]] = {
            "emb.tok": (c.vocab_size, c.d_model),
            "emb.pos_enc": (c.max_len, c.d_model),
            "emb.ln.g": (c.d_model,),
            "emb.ln.b": (c.d_model,),
        }
        d, f = c.d_model, c.d_ff
        layer_shapes = {
            "attn.wq": (d, d), "attn.bq": (d,), "attn.wk": (d, d), "attn.bk": (d,),
            "attn.wv": (d, d), "attn.bv": (d,), "attn.wo": (d, d), "attn.bo": (d,),
            "ln1.g": (d,), "ln1.b": (d,),
            "ffn.w1": (d, f), "ffn.b1": (f,), "ffn.w2": (f, d), "ffn.b2": (d,),
            "ln2.g": (d,), "ln2.b": (d,),
        }
        for i in range(c.n_encoder_layers):
            for part, shape in layer_shapes.items():
                shapes[f"enc.{i}.{part}"] = shape
        prefixes = self.decoder_prefixes()
        if prefixes:
            shapes["emb.pos_dec"] = (c.max_len, c.d_model)
        for prefix in prefixes:
            for i in range(c.n_decoder_layers):
                for part, shape in layer_shapes.items():
                    shapes[f"{prefix}.{i}.{part}"] = shape
        if c.shared_decoder:
            shapes["sec.emb"] = (2, c.d_model)
        shapes["head.b"] = (c.vocab_size,)
        if not c.tie_output_embeddings:
            shapes["head.w"] = (c.vocab_size, c.d_model)
        return shapes

    def decoder_prefixes(self) -> list[str]:
        c = self.config
        if not (c.reasoning_decoder or c.decision_decoder):
            return []
        if c.shared_decoder:
            return ["shr"]
        out = []
        if c.reasoning_decoder:
            out.append("rea")
        if c.decision_decoder:
            out.append("dcd")
        return out

    def _init_params(self) -> None:
        dtype = np.dtype(self.config.dtype)
        for name, shape in self._param_shapes().items():
            # Per-name streams keep initialization identical across
            # ablations that allocate different parameter subsets.
            rng = derive_rng(self.seed, "init", name)
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("g",):
                data = np.ones(shape, dtype=dtype)
            elif leaf in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
                data = np.zeros(shape, dtype=dtype)
            else:
                data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
            self.params[name] = Tensor(data, requires_grad=True, name=name)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward pieces --------------------------------------------------

    def _mha(self, x: Tensor, prefix: str) -> Tensor:
        c = self.config
        n = x.shape[0]
        dh = c.d_model // c.n_heads
        p = self.params
        q = ag.matmul(x, p[f"{prefix}.attn.wq"]) + p[f"{prefix}.attn.bq"]
        k = ag.matmul(x, p[f"{prefix}.attn.wk"]) + p[f"{prefix}.attn.bk"]
        v = ag.matmul(x, p[f"{prefix}.attn.wv"]) + p[f"{prefix}.attn.bv"]
        # (n, d) -> (heads, n, dh)
        q = ag.transpose(ag.reshape(q, (n, c.n_heads, dh)), (1, 0, 2))
        k = ag.transpose(ag.reshape(k, (n, c.n_heads, dh)), (1, 0, 2))
        v = ag.transpose(ag.reshape(v, (n, c.n_heads, dh)), (1, 0, 2))
        scores = ag.matmul(q, ag.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
        attn = ag.softmax(scores, axis=-1)
        ctx = ag.matmul(attn, v)
        ctx = ag.reshape(ag.transpose(ctx, (1, 0, 2)), (n, c.d_model))
        return ag.matmul(ctx, p[f"{prefix}.attn.wo"]) + p[f"{prefix}.attn.bo"]

    def _block(self, x: Tensor, prefix: str, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
        p = self.params
        rate = self.config.dropout if train else 0.0
        attn = self._mha(x, prefix)
        if rate > 0:
            attn = ag.dropout(attn, rate, rng)
        x = ag.layer_norm(x + attn, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        h = ag.gelu(ag.matmul(x, p[f"{prefix}.ffn.w1"]) + p[f"{prefix}.ffn.b1"])
        h = ag.matmul(h, p[f"{prefix}.ffn.w2"]) + p[f"{prefix}.ffn.b2"]
        if rate > 0:
            h = ag.dropout(h, rate, rng)
        return ag.layer_norm(x + h, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])

    def _encoder_states(self, token_ids: Sequence[int], train: bool = False,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
        c = self.config
        if len(token_ids) + 1 > c.max_len:
            raise SequenceTooLong(f"{len(token_ids)} tokens + [CLS] exceeds max_len {c.max_len}")
        ids = np.asarray([CLS] + list(token_ids), dtype=np.int64)
        pos = np.arange(len(ids))
        x = ag.embedding(self.params["emb.tok"], ids) + ag.embedding(self.params["emb.pos_enc"], pos)
        x = ag.layer_norm(x, self.params["emb.ln.g"], self.params["emb.ln.b"])
        for i in range(c.n_encoder_layers):
            x = self._block(x, f"enc.{i}", train, rng)
        return x

    def _decoder_states(self, h_f: Tensor, token_ids: Sequence[int], which: str,
                        train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        c = self.config
        if len(token_ids) + 1 > c.max_len:
            raise SequenceTooLong(f"{len(token_ids)} tokens + fact vector exceeds max_len {c.max_len}")
        if which not in _STACKS:
            raise ValueError(f"unknown decoder section {which!r}")
        if which == REASONING and not c.reasoning_decoder:
            raise ValueError("model was built without a reasoning decoder")
        if which == DECISION and not c.decision_decoder:
            raise ValueError("model was built without a decision decoder")
        prefix = "shr" if c.shared_decoder else _STACKS[which]

        row0 = ag.reshape(h_f, (1, c.d_model))
        if c.shared_decoder:
            sec = ag.embedding(self.params["sec.emb"], np.asarray([0 if which == REASONING else 1]))
            row0 = row0 + sec
        ids = np.asarray(token_ids, dtype=np.int64)
        pos = np.arange(len(ids))
        tok = ag.embedding(self.params["emb.tok"], ids) + ag.embedding(self.params["emb.pos_dec"], pos)
        x = ag.concat([row0, tok], axis=0)
        for i in range(c.n_decoder_layers):
            x = self._block(x, f"{prefix}.{i}", train, rng)
        return x

    def _logits(self, states: Tensor) -> Tensor:
        if self.config.tie_output_embeddings:
            w = ag.transpose(self.params["emb.tok"], (1, 0))
        else:
            w = ag.transpose(self.params["head.w"], (1, 0))
        return ag.matmul(states, w) + self.params["head.b"]

    # -- public ops -------------------------------------------------------

    def encode_fact(self, masked_fact: MaskedExample, train: bool = False,
                    rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor]:
        """Run the encoder over a masked fact; h_F is the [CLS] final state."""
        states = self._encoder_states(masked_fact.input_ids, train, rng)
        h_f = ag.reshape(ag.gather_rows(states, np.asarray([0])), (self.config.d_model,))
        return h_f, states

    def _masked_nll(self, states: Tensor, positions: Sequence[int], targets: Sequence[int],
                    offset: int = 1) -> tuple[Tensor, int]:
        """Summed negative log-likelihood at masked positions (input offset by 1)."""
        idx = np.asarray(positions, dtype=np.int64) + offset
        picked_states = ag.gather_rows(states, idx)
        logits = self._logits(picked_states)
        logp = ag.log_softmax(logits, axis=-1)
        chosen = ag.pick(logp, np.asarray(targets, dtype=np.int64))
        return ag.tensor_sum(chosen) * -1.0, len(targets)

    def loss_mlm(self, token_states: Tensor, masked_fact: MaskedExample) -> Tensor:
        """Mean NLL of the original fact tokens at the masked positions."""
        if not masked_fact.mask_positions:
            raise NoMaskedPositions("fact example has no masked positions")
        nll, k = self._masked_nll(token_states, masked_fact.mask_positions, masked_fact.target_ids)
        return nll * (1.0 / k)

    def decode_section(self, h_f: Tensor, masked_section: MaskedExample, which: str,
                       train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits at the section's masked positions, conditioned on h_F at row 0."""
        states = self._decoder_states(h_f, masked_section.input_ids, which, train, rng)
        idx = np.asarray(masked_section.mask_positions, dtype=np.int64) + 1
        return self._logits(ag.gather_rows(states, idx))

    def _section_loss(self, h_f: Tensor, masked_section: MaskedExample, which: str,
                      train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        if not masked_section.mask_positions:
            raise NoMaskedPositions(f"{which} example has no masked positions")
        states = self._decoder_states(h_f, masked_section.input_ids, which, train, rng)
        nll, k = self._masked_nll(states, masked_section.mask_positions, masked_section.target_ids)
        return nll * (1.0 / k)

    def loss_rea(self, h_f: Tensor, masked_reasoning: MaskedExample, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        return self._section_loss(h_f, masked_reasoning, REASONING, train, rng)

    def loss_dec(self, h_f: Tensor, masked_decision: MaskedExample, train: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
        return self._section_loss(h_f, masked_decision, DECISION, train, rng)

    def loss_total(self, batch: Sequence[PretrainExample], train: bool = False,
                   rng: Optional[np.random.Generator] = None) -> tuple[Tensor, LossBreakdown]:
        """Unweighted sum of the three components, each a mean over masked positions.

        Sections that are absent, empty, or unmasked contribute nothing and
        are counted in the breakdown.
        """
        c = self.config
        sums = {"mlm": None, "rea": None, "dec": None}
        counts = {"mlm": 0, "rea": 0, "dec": 0}
        skipped = {"rea": 0, "dec": 0}

        def _add(key: str, nll: Tensor, k: int):
            sums[key] = nll if sums[key] is None else sums[key] + nll
            counts[key] += k

        for ex in batch:
            h_f, states = self.encode_fact(ex.fact, train, rng)
            if ex.fact.mask_positions:
                nll, k = self._masked_nll(states, ex.fact.mask_positions, ex.fact.target_ids)
                _add("mlm", nll, k)
            if c.reasoning_decoder:
                if ex.reasoning is not None and ex.reasoning.mask_positions:
                    st = self._decoder_states(h_f, ex.reasoning.input_ids, REASONING, train, rng)
                    nll, k = self._masked_nll(st, ex.reasoning.mask_positions, ex.reasoning.target_ids)
                    _add("rea", nll, k)
                else:
                    skipped["rea"] += 1
            if c.decision_decoder:
                if ex.decision is not None and ex.decision.mask_positions:
                    st = self._decoder_states(h_f, ex.decision.input_ids, DECISION, train, rng)
                    nll, k = self._masked_nll(st, ex.decision.mask_positions, ex.decision.target_ids)
                    _add("dec", nll, k)
                else:
                    skipped["dec"] += 1

        parts = {}
        total: Optional[Tensor] = None
        for key in ("mlm", "rea", "dec"):
            if sums[key] is not None:
                part = sums[key] * (1.0 / counts[key])
                parts[key] = part
                total = part if total is None else total + part
        if total is None:
            raise NoMaskedPositions("no masked positions anywhere in the batch")

        def val(key):
            return float(parts[key].data) if key in parts else 0.0

        breakdown = LossBreakdown(
            l_mlm=val("mlm"),
            l_rea=val("rea"),
            l_dec=val("dec"),
            l_total=float(total.data),
            skipped_reasoning=skipped["rea"],
            skipped_decision=skipped["dec"],
        )
        return total, breakdown

    def embed(self, token_ids: Sequence[int]) -> np.ndarray:
        """Unmasked [CLS] vector for retrieval; raw, not length-normalized."""
        if len(token_ids) == 0:
            raise EmptyInput("cannot embed an empty token sequence")
        with ag.no_grad():
            states = self._encoder_states(token_ids, train=False)
        return np.array(states.data[0], copy=True)

    def embed_with_grad(self, token_ids: Sequence[int], train: bool = False,
                        rng: Optional[np.random.Generator] = None) -> Tensor:
        """Differentiable [CLS] vector (fine-tuning path)."""
        if len(token_ids) == 0:
            raise EmptyInput("cannot embed an empty token sequence")
        states = self._encoder_states(token_ids, train, rng)
        return ag.reshape(ag.gather_rows(states, np.asarray([0])), (self.config.d_model,))

    # -- persistence ------------------------------------------------------

    def save(self, path, meta: Optional[dict] = None) -> None:
        tensors = {name: p.data for name, p in self.params.items()}
        save_checkpoint(path, self.config.to_dict(), tensors, meta)

    @classmethod
    def load(cls, path) -> "StructuredCaseEncoder":
        config_dict, tensors, _meta = load_checkpoint(path)
        config = ModelConfig.from_dict(config_dict)
        model = cls(config, init=False)
        expected = set(model._param_shapes())
        missing = expected - set(tensors)
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        for name in sorted(expected):
            model.params[name] = Tensor(tensors[name].copy(), requires_grad=True, name=name)
        return model

    def drop_decoders(self) -> "StructuredCaseEncoder":
        """Encoder-only copy of this model (fine-tuning output form)."""
        cfg = ModelConfig.from_dict(self.config.to_dict())
        cfg.reasoning_decoder = False
        cfg.decision_decoder = False
        cfg.shared_decoder = False
        out = StructuredCaseEncoder(cfg, seed=self.seed, init=False)
        for name in out._param_shapes():
            out.params[name] = self.params[name]
        return out
