"""Token model: embedding, pre-norm log-linear attention blocks, linear head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import IMPLS, AttentionConfig, AttentionLayer
from .autodiff import Tensor
from .fenwick import num_levels
from .lam import xavier_uniform

CHECKPOINT_MAGIC = b"LLLABCKP"
CHECKPOINT_VERSION = 1

# λ-MLP parameters must stay below this fraction of the model at d_h = 2L
OVERHEAD_BOUND = Fraction(7, 100_000)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    d_head: int = 32
    t_max: int = 128
    lambda_mode: str = "mlp_softplus"
    d_h: int = 64
    ffn_mult: int = 4
    seed: int = 0
    attention_impl: str = "masked"
    short_conv: int = 0

    def __post_init__(self):
        problems = []
        if self.n_heads * self.d_head != self.d_model:
            problems.append(f"n_heads * d_head == d_model ({self.n_heads}*{self.d_head} != {self.d_model})")
        if self.vocab_size < 2:
            problems.append(f"vocab_size >= 2 (got {self.vocab_size})")
        if self.d_h < 1:
            problems.append(f"d_h >= 1 (got {self.d_h})")
        if self.n_layers < 1 or self.ffn_mult < 1:
            problems.append("n_layers >= 1 and ffn_mult >= 1")
        if self.t_max < 1 or self.t_max & (self.t_max - 1):
            problems.append(f"t_max is a power of two (got {self.t_max})")
        if self.attention_impl not in IMPLS:
            problems.append(f"attention_impl in {IMPLS} (got {self.attention_impl!r})")
        if problems:
            raise ValueError("invalid model config: " + "; ".join(problems))

    @property
    def n_levels(self) -> int:
        return num_levels(self.t_max)

    def attention(self) -> AttentionConfig:
        return AttentionConfig(
            self.d_model, self.n_heads, self.d_head, self.t_max, self.lambda_mode, self.d_h, self.short_conv
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class Block:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d, f = cfg.d_model, cfg.ffn_mult * cfg.d_model
        self.norm_1 = Tensor(np.ones(d), requires_grad=True)
        self.attn = AttentionLayer(cfg.attention(), rng)
        self.norm_2 = Tensor(np.ones(d), requires_grad=True)
        self.ffn_in = Tensor(xavier_uniform(rng, d, f), requires_grad=True)
        self.ffn_out = Tensor(xavier_uniform(rng, f, d), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"norm_1": self.norm_1}
        out.update({f"attn.{k}": v for k, v in self.attn.named_parameters().items()})
        out.update(norm_2=self.norm_2, ffn_in=self.ffn_in, ffn_out=self.ffn_out)
        return out

    def __call__(self, x: Tensor, impl: str, lambdas: list | None = None) -> Tensor:
        h = ad.layer_norm(x, self.norm_1)
        if lambdas is not None:
            lambdas.append(self.attn.lambdas(h).data)
        x = x + self.attn.forward(h, impl)
        h = ad.layer_norm(x, self.norm_2)
        return x + ad.gelu(h @ self.ffn_in) @ self.ffn_out


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embed = Tensor(xavier_uniform(rng, cfg.vocab_size, cfg.d_model), requires_grad=True)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.norm_f = Tensor(np.ones(cfg.d_model), requires_grad=True)
        self.head = Tensor(xavier_uniform(rng, cfg.d_model, cfg.vocab_size), requires_grad=True)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.named_parameters().items()})
        out.update(norm_f=self.norm_f, head=self.head)
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def forward(self, tokens, impl: str | None = None, lambdas: list | None = None) -> Tensor:
        """Logits (B, T, V) for token ids (B, T); a 1-D input gives (T, V).

        When ``lambdas`` is a list, each layer's dense λ (B, T, H, L) is
        appended to it.
        """
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None]
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (T,) or (B, T), got shape {tokens.shape}")
        bad = np.argwhere((tokens < 0) | (tokens >= self.cfg.vocab_size))
        if len(bad):
            b, t = bad[0]
            raise ValueError(f"token id {tokens[b, t]} at position {t} (sequence {b}) outside [0, {self.cfg.vocab_size})")
        if tokens.shape[1] > self.cfg.t_max:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds t_max {self.cfg.t_max}")
        impl = impl or self.cfg.attention_impl
        x = ad.embedding(self.embed, tokens)
        for blk in self.blocks:
            x = blk(x, impl, lambdas)
        logits = ad.layer_norm(x, self.norm_f) @ self.head
        return logits.reshape(logits.shape[1:]) if squeeze else logits

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(state) ^ set(params))}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]


def build(cfg: ModelConfig) -> Model:
    return Model(cfg)


# ------------------------------------------------------------ gradient check


def grad_check_model(
    cfg: ModelConfig, seed: int = 0, batch_size: int = 2, eps: float = 1e-4, tol: float = 1e-4
) -> ad.GradCheckReport:
    """Finite-difference check of every parameter on a random masked batch.

    At init the λ-MLP output weights are zero, so W_1 gets no gradient at
    all and the check would pass it vacuously. W_2 is therefore redrawn
    from the same Xavier distribution as W_1 before checking.
    """
    model = Model(cfg)
    rng = np.random.default_rng(seed)
    for blk in model.blocks:
        lam = blk.attn.lam
        if lam.W_2 is not None:
            lam.W_2.data[:] = xavier_uniform(rng, *lam.W_2.shape)
    T = cfg.t_max
    tokens = rng.integers(0, cfg.vocab_size, (batch_size, T))
    targets = rng.integers(0, cfg.vocab_size, (batch_size, T))
    mask = rng.random((batch_size, T)) < 0.6
    mask[0, -1] = True
    return ad.grad_check(
        lambda: ad.cross_entropy(model.forward(tokens), targets, mask), model.named_parameters(), eps=eps, tol=tol
    )


# ------------------------------------------------------------ parameter audit


def parameter_counts(cfg: ModelConfig) -> dict[str, int]:
    """Exact parameter counts from shapes alone (no allocation)."""
    d, V, L = cfg.d_model, cfg.vocab_size, cfg.n_levels
    mlp = 0 if cfg.lambda_mode == "baseline" else 2 * L * cfg.d_h + 1
    conv = 3 * cfg.short_conv * d
    per_layer = 2 * d + 4 * d * d + conv + d * cfg.n_heads * L + mlp + 2 * cfg.ffn_mult * d * d
    return {
        "total": 2 * V * d + d + cfg.n_layers * per_layer,
        "lambda_mlp": cfg.n_layers * mlp,
        "lambda_proj": cfg.n_layers * d * cfg.n_heads * L,
    }


def lambda_overhead(cfg: ModelConfig) -> Fraction:
    """MLP-λ parameters over total parameters of the MLP-λ model, exactly."""
    if cfg.lambda_mode == "baseline":
        raise ValueError("overhead is defined for the MLP λ modes")
    counts = parameter_counts(cfg)
    return Fraction(counts["lambda_mlp"], counts["total"])


# ------------------------------------------------------------ checkpoints


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    """Write magic, version, a JSON header and raw little-endian float64 arrays."""
    params = model.named_parameters()
    header = {
        "config": asdict(model.cfg),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for v in params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", raw, off)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(raw[off : off + hlen])
    off += hlen
    model = Model(ModelConfig.from_dict(header["config"]))
    state = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        state[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(entry["shape"]).copy()
        off += 8 * n
    model.load_state_dict(state)
    return model, header.get("extra", {})
