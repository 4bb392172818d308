"""GPT-2-style decoder-only language model on top of :mod:`modmoe.numerics`."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .corpus import Document, by_language, make_batches, pack_sequences
from .numerics import Rng, Tensor
from .tokenizer import Tokenizer

IGNORE = -100


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    context_len: int = 128
    vocab_size: int = 2048
    tie_embeddings: bool = True

    def __post_init__(self):
        for k in ("n_layers", "n_heads", "d_model", "d_ff", "context_len", "vocab_size"):
            if getattr(self, k) < 1:
                raise ValueError(f"ModelConfig.{k} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


TEACHER_DEFAULT = ModelConfig(n_layers=4, n_heads=4, d_model=128, d_ff=512, context_len=128)
STUDENT_DEFAULT = ModelConfig(n_layers=2, n_heads=2, d_model=64, d_ff=256, context_len=128)


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = [("wte", (cfg.vocab_size, d)), ("wpe", (cfg.context_len, d))]
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        shapes += [
            (p + "ln1.g", (d,)), (p + "ln1.b", (d,)),
            (p + "attn.w_q", (d, d)), (p + "attn.b_q", (d,)),
            (p + "attn.w_k", (d, d)), (p + "attn.b_k", (d,)),
            (p + "attn.w_v", (d, d)), (p + "attn.b_v", (d,)),
            (p + "attn.w_o", (d, d)), (p + "attn.b_o", (d,)),
            (p + "ln2.g", (d,)), (p + "ln2.b", (d,)),
            (p + "mlp.w_fc", (d, f)), (p + "mlp.b_fc", (f,)),
            (p + "mlp.w_proj", (f, d)), (p + "mlp.b_proj", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,))]
    if not cfg.tie_embeddings:
        shapes.append(("head", (d, cfg.vocab_size)))
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for _, s in param_shapes(cfg))


class TransformerLM:
    """Pre-norm decoder with learned positions, GELU MLP and (by default) a tied head.

    ``shared_wte`` lets several models read and write one token-embedding
    table (the joint-embedding MoE setups).
    """

    def __init__(self, config: ModelConfig, rng: Rng | None = None, shared_wte: Tensor | None = None,
                 init: bool = True):
        self.config = config
        self.params: dict[str, Tensor] = {}
        dtype = nx.get_dtype()
        resid_std = 0.02 / math.sqrt(2 * config.n_layers)
        rng = rng if rng is not None else Rng(0)
        for name, shape in param_shapes(config):
            if name == "wte" and shared_wte is not None:
                if shared_wte.shape != shape:
                    raise ValueError(f"shared embedding shape {shared_wte.shape} != {shape}")
                self.params[name] = shared_wte
                continue
            if not init or name.endswith(".b") or ".b_" in name:
                data = np.zeros(shape, dtype=dtype)
            elif name.endswith(".g"):
                data = np.ones(shape, dtype=dtype)
            else:
                std = resid_std if name.endswith(("w_o", "w_proj")) else 0.02
                data = rng.substream(name).normal(shape, std, dtype)
            self.params[name] = Tensor(data, requires_grad=True, name=name)
        self.embedding_shared = shared_wte is not None

    # -- parameter access -------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def own_parameters(self) -> list[Tensor]:
        """Parameters excluding a shared token embedding."""
        return [p for n, p in self.params.items() if not (n == "wte" and self.embedding_shared)]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward ----------------------------------------------------------

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, T = ids.shape
        cfg = self.config
        if T > cfg.context_len:
            raise ValueError(f"sequence length {T} exceeds context_len {cfg.context_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
        P = self.params
        H, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = nx.add(nx.embedding_lookup(P["wte"], ids), nx.embedding_lookup(P["wpe"], np.arange(T)))
        for i in range(cfg.n_layers):
            p = f"blocks.{i}."
            h = nx.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])

            def heads(w, b):
                y = nx.add(nx.matmul(h, P[p + w]), P[p + b])
                return nx.transpose(nx.reshape(y, (B, T, H, hd)), (0, 2, 1, 3))

            q, k, v = heads("attn.w_q", "attn.b_q"), heads("attn.w_k", "attn.b_k"), heads("attn.w_v", "attn.b_v")
            att = nx.softmax(nx.causal_attention_scores(q, k))
            y = nx.reshape(nx.transpose(nx.matmul(att, v), (0, 2, 1, 3)), (B, T, cfg.d_model))
            x = nx.add(x, nx.add(nx.matmul(y, P[p + "attn.w_o"]), P[p + "attn.b_o"]))
            h = nx.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            h = nx.gelu(nx.add(nx.matmul(h, P[p + "mlp.w_fc"]), P[p + "mlp.b_fc"]))
            x = nx.add(x, nx.add(nx.matmul(h, P[p + "mlp.w_proj"]), P[p + "mlp.b_proj"]))
        x = nx.layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        head = nx.transpose(P["wte"], (1, 0)) if cfg.tie_embeddings else P["head"]
        return nx.matmul(x, head)

    __call__ = forward

    # -- serialization helpers -------------------------------------------

    def state_bytes(self, names: Sequence[str] | None = None) -> bytes:
        names = list(self.params) if names is None else names
        return b"".join(np.ascontiguousarray(self.params[n].data, dtype="<f4").tobytes() for n in names)


def forward(model: TransformerLM, token_ids) -> Tensor:
    return model.forward(token_ids)


# ---------------------------------------------------------------------------
# losses and evaluation


def shift_targets(tokens: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Next-token targets aligned with ``tokens``; the final position and padding are ignored."""
    tokens = np.asarray(tokens)
    tgt = np.full(tokens.shape, IGNORE, dtype=np.int64)
    tgt[..., :-1] = tokens[..., 1:]
    if mask is not None:
        tgt[..., :-1][~np.asarray(mask)[..., 1:]] = IGNORE
    return tgt


def lm_loss(logits: Tensor, targets, pad_mask=None) -> Tensor:
    """Mean next-token cross-entropy (nats) over non-masked target positions.

    ``targets`` are already shifted (see :func:`shift_targets`); ``pad_mask``,
    if given, is aligned with ``targets`` and False entries are excluded.
    """
    targets = np.asarray(targets)
    if pad_mask is not None:
        targets = np.where(np.asarray(pad_mask, dtype=bool), targets, IGNORE)
    if not np.any(targets != IGNORE):
        raise ValueError("lm_loss: all positions are masked")
    return nx.cross_entropy(logits, targets, ignore_index=IGNORE)


def sequence_nll(model: TransformerLM, tokens: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, int]:
    """Summed next-token NLL (float64) and target count for one sequence."""
    with nx.no_grad():
        logits = model.forward(tokens[None, :]).data[0]
    return nll_from_logits(logits, tokens, mask)


def nll_from_logits(logits: np.ndarray, tokens: np.ndarray, mask: np.ndarray | None = None) -> tuple[float, int]:
    tgt = shift_targets(tokens, mask)
    keep = tgt != IGNORE
    logp = nx.log_softmax_np(logits.astype(np.float64))
    rows = np.nonzero(keep)[0]
    return float(-logp[rows, tgt[rows]].sum()), int(rows.size)


def eval_windows(docs: Sequence[Document], tokenizer: Tokenizer, context_len: int,
                 max_windows: int | None = None) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Deterministic per-language evaluation windows (no shuffling)."""
    out = {}
    for lang, group in by_language(docs).items():
        if not group:
            continue
        toks, mask = pack_sequences(group, tokenizer, context_len)
        if max_windows:
            toks, mask = toks[:max_windows], mask[:max_windows]
        out[lang] = (toks, mask)
    return out


def evaluate_ce(model: TransformerLM, windows: dict[str, tuple[np.ndarray, np.ndarray]]) -> dict[str, float]:
    """Token-weighted mean cross-entropy per language, one sequence at a time."""
    res = {}
    for lang, (toks, mask) in windows.items():
        total, n = 0.0, 0
        for t, m in zip(toks, mask):
            s, c = sequence_nll(model, t, m)
            total += s
            n += c
        res[lang] = total / n
    return res


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHyper:
    steps: int = 300
    micro_batch: int = 8
    virtual_batch: int = 16
    lr: float = 3e-4
    min_lr: float = 3e-5
    warmup: int = 20
    weight_decay: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    clip: float = 1.0
    eval_every: int = 50
    eval_windows: int | None = 32

    @property
    def accum_steps(self) -> int:
        if self.virtual_batch % self.micro_batch:
            raise ValueError(f"virtual_batch {self.virtual_batch} is not a multiple of micro_batch {self.micro_batch}")
        return self.virtual_batch // self.micro_batch


def lr_at(h: TrainHyper, step: int) -> float:
    """Linear warmup followed by cosine decay to ``min_lr``."""
    if h.warmup and step < h.warmup:
        return h.lr * (step + 1) / h.warmup
    span = max(1, h.steps - h.warmup)
    frac = min(1.0, (step - h.warmup) / span)
    return h.min_lr + 0.5 * (h.lr - h.min_lr) * (1 + math.cos(math.pi * frac))


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)


def accumulate_gradients(model: TransformerLM, micro_batches: Sequence[tuple[np.ndarray, np.ndarray]]) -> float:
    """Backpropagate the mean loss over ``micro_batches`` into ``model``'s grads.

    Each micro-batch contributes ``loss / k``; returns the mean loss.
    """
    k = len(micro_batches)
    total = 0.0
    for toks, mask in micro_batches:
        tgt = shift_targets(toks, mask)
        loss = lm_loss(model.forward(toks), tgt)
        if not np.isfinite(loss.data):
            raise TrainingDiverged("loss became non-finite")
        nx.backward(nx.scale(loss, 1.0 / k))
        total += float(loss.data)
    return total / k


def train_teacher(config: ModelConfig, docs: Sequence[Document], tokenizer: Tokenizer,
                  hyper: TrainHyper | None = None, seed: int = 0,
                  val_docs: Sequence[Document] | None = None,
                  log_fn=None) -> tuple[TransformerLM, TrainLog]:
    """Train a language model on mixed-language batches with accumulation and clipping."""
    h = hyper or TrainHyper()
    if tokenizer.vocab_size != config.vocab_size:
        raise ValueError(f"tokenizer vocab {tokenizer.vocab_size} != model vocab {config.vocab_size}")
    root = Rng(seed)
    model = TransformerLM(config, root.substream("init"))
    opt = nx.AdamW(model.parameters(), lr=h.lr, betas=h.betas, weight_decay=h.weight_decay)
    stream = make_batches(docs, tokenizer, config.context_len, h.micro_batch, mode="mixed",
                          seed=root.substream("batching").seed, epochs=None, drop_last=True)
    windows = eval_windows(val_docs, tokenizer, config.context_len, h.eval_windows) if val_docs else None
    log = TrainLog()
    k = h.accum_steps
    for step in range(h.steps):
        micro = [(b.tokens, b.mask) for b in (next(stream) for _ in range(k))]
        model.zero_grad()
        try:
            loss = accumulate_gradients(model, micro)
            norm, _ = nx.clip_grad_norm(model.parameters(), h.clip)
        except (TrainingDiverged, nx.NonFiniteGradient) as e:
            raise TrainingDiverged(f"training diverged at step {step}: {e}") from None
        lr = lr_at(h, step)
        opt.step(lr)
        rec = {"step": step, "loss": loss, "lr": lr, "grad_norm": norm}
        log.steps.append(rec)
        if windows and ((step + 1) % h.eval_every == 0 or step + 1 == h.steps):
            ce = evaluate_ce(model, windows)
            log.evals.append({"step": step + 1, **{f"val_{l}": ce[l] for l in ce}})
        if log_fn:
            log_fn(rec)
    return model, log


# ---------------------------------------------------------------------------
# checkpoints

CKPT_FORMAT = "modmoe-checkpoint-1"


def save_checkpoint(model: TransformerLM, path, seed: int | None = None, step: int | None = None,
                    exclude: Sequence[str] = ()) -> Path:
    """Write ``manifest.json`` plus a little-endian float32 ``weights.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = [n for n in model.params if n not in exclude]
    tensors, offset = [], 0
    blobs = []
    for n in names:
        arr = np.ascontiguousarray(model.params[n].data, dtype="<f4")
        blobs.append(arr.tobytes())
        tensors.append({"name": n, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    manifest = {
        "format": CKPT_FORMAT,
        "config": model.config.to_dict(),
        "dtype": "<f4",
        "tensors": tensors,
        "excluded": list(exclude),
        "seed": seed,
        "step": step,
    }
    (path / "weights.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, shared_wte: Tensor | None = None) -> TransformerLM:
    path = Path(path)
    mpath, wpath = path / "manifest.json", path / "weights.bin"
    for p in (mpath, wpath):
        if not p.exists():
            raise CheckpointError(f"missing checkpoint file {p}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"unrecognised checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig(**manifest["config"])
    blob = wpath.read_bytes()
    expected = dict(param_shapes(cfg))
    excluded = set(manifest.get("excluded", []))
    if "wte" in excluded and shared_wte is None:
        raise CheckpointError("checkpoint excludes tensor 'wte'; a shared embedding must be supplied")
    model = TransformerLM(cfg, shared_wte=shared_wte if "wte" in excluded else None, init=False)
    seen = set()
    for t in manifest["tensors"]:
        name = t["name"]
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} in manifest")
        if tuple(t["shape"]) != expected[name]:
            raise CheckpointError(f"tensor {name!r}: manifest shape {tuple(t['shape'])} "
                                  f"does not match config shape {expected[name]}")
        nbytes = 4 * math.prod(expected[name])
        if t["nbytes"] != nbytes or t["offset"] + nbytes > len(blob):
            raise CheckpointError(f"tensor {name!r}: byte range out of bounds in weights.bin")
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=t["offset"]).reshape(expected[name])
        model.params[name].data = arr.astype(nx.get_dtype(), copy=True)
        seen.add(name)
    missing = set(expected) - seen - excluded
    if missing:
        raise CheckpointError(f"tensor {sorted(missing)[0]!r} missing from manifest")
    return model


def checkpoint_meta(path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())
