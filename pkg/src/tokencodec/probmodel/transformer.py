"""Small decoder-only causal transformer over token grids.

Training runs in torch (teacher-forced, cross-entropy on the model's
role positions); the trained weights are exported to numpy and all
inference, both pure calls and scoring sessions, runs through one
incremental numpy path so sender and receiver always see bit-identical
distributions.

Each input slot embeds the previous symbol plus learned (frame, layer)
position tables for the slot being predicted; a start token feeds the
first slot.  When a stream outgrows the context cap the session evicts
the oldest whole frames from its key/value cache; retained activations
are left as computed, which is the usual streaming convention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, asdict

import numpy as np

from ..errors import ContextError, InsufficientData, ShapeError, TrainingDiverged
from ..rvq import CodecConfig
from .base import ScoringSession, TokenModel, floor_distribution, register_kind, _check_grid_role
from .flatten import ROLE_FINE, role_layout


@dataclass(frozen=True)
class TransformerConfig:
    """Architecture and optimization knobs (desk-scale defaults)."""

    n_blocks: int = 4
    n_heads: int = 8
    d_model: int = 256
    context_cap: int = 1024
    max_frames: int = 4096
    learning_rate: float = 3e-4
    n_steps: int = 300
    batch_size: int = 8

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.context_cap < 1:
            raise ValueError("context_cap must be >= 1")

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation, matching the torch side exactly
    return 0.5 * x * (1.0 + np.tanh(0.7978845608028654 * (x + 0.044715 * x * x * x)))


def _layer_norm(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean()
    var = x.var()
    return (x - mu) / np.sqrt(var + 1e-5) * w + b


class _KVCache:
    """Rolling per-block key/value store for one session."""

    def __init__(self, n_heads: int, head_dim: int, capacity: int):
        self.k = np.empty((n_heads, capacity, head_dim), dtype=np.float32)
        self.v = np.empty((n_heads, capacity, head_dim), dtype=np.float32)
        self.start = 0
        self.end = 0

    def append(self, k: np.ndarray, v: np.ndarray) -> None:
        if self.end == self.k.shape[1]:
            n = self.end - self.start
            self.k[:, :n] = self.k[:, self.start : self.end]
            self.v[:, :n] = self.v[:, self.start : self.end]
            self.start, self.end = 0, n
        self.k[:, self.end] = k
        self.v[:, self.end] = v
        self.end += 1

    def drop(self, n: int) -> None:
        self.start += n

    def view(self):
        return self.k[:, self.start : self.end], self.v[:, self.start : self.end]


class TransformerSession(ScoringSession):
    def __init__(self, model: "TransformerModel"):
        self._m = model
        arch = model.arch
        capacity = arch.context_cap + model.cfg.n_layers + 1
        self._caches = [
            _KVCache(arch.n_heads, arch.head_dim, capacity)
            for _ in range(arch.n_blocks)
        ]
        self._slot_frames: list[int] = []
        self._prev_token = model.nc          # start-of-stream token
        self._pending: tuple[int, int] | None = None

    def _evict_for_room(self) -> None:
        cap = self._m.arch.context_cap
        while len(self._slot_frames) >= cap:
            oldest = self._slot_frames[0]
            n = 0
            while n < len(self._slot_frames) and self._slot_frames[n] == oldest:
                n += 1
            del self._slot_frames[:n]
            for cache in self._caches:
                cache.drop(n)

    def _advance(self, frame: int, layer: int) -> np.ndarray:
        """Create the slot predicting (frame, layer); returns its final
        hidden state."""
        m = self._m
        p = m.params
        arch = m.arch
        self._evict_for_room()
        x = (
            p["tok_emb.weight"][self._prev_token]
            + p["frame_emb.weight"][frame % arch.max_frames]
            + p["layer_emb.weight"][layer - 1]
        ).astype(np.float32)
        h_dim = arch.head_dim
        for i, cache in enumerate(self._caches):
            pre = f"blocks.{i}."
            h = _layer_norm(x, p[pre + "ln1.weight"], p[pre + "ln1.bias"])
            q = (h @ p[pre + "attn.wq.weight"].T + p[pre + "attn.wq.bias"]).reshape(arch.n_heads, h_dim)
            k = (h @ p[pre + "attn.wk.weight"].T + p[pre + "attn.wk.bias"]).reshape(arch.n_heads, h_dim)
            v = (h @ p[pre + "attn.wv.weight"].T + p[pre + "attn.wv.bias"]).reshape(arch.n_heads, h_dim)
            cache.append(k, v)
            keys, values = cache.view()
            scores = np.einsum("hd,htd->ht", q, keys) / np.sqrt(h_dim)
            scores -= scores.max(axis=1, keepdims=True)
            weights = np.exp(scores)
            weights /= weights.sum(axis=1, keepdims=True)
            attended = np.einsum("ht,htd->hd", weights, values).reshape(arch.d_model)
            x = x + attended @ p[pre + "attn.wo.weight"].T + p[pre + "attn.wo.bias"]
            h2 = _layer_norm(x, p[pre + "ln2.weight"], p[pre + "ln2.bias"])
            x = x + _gelu(h2 @ p[pre + "mlp.w1.weight"].T + p[pre + "mlp.w1.bias"]) \
                @ p[pre + "mlp.w2.weight"].T + p[pre + "mlp.w2.bias"]
        self._slot_frames.append(frame)
        return x

    def predict(self, frame: int, layer: int) -> np.ndarray:
        if not self._m.predicts(layer):
            raise ContextError(
                f"{self._m.role} model does not predict layer {layer}"
            )
        if self._pending is not None:
            raise ContextError("predict called twice without an intervening push")
        x = self._advance(frame, layer)
        p = self._m.params
        h = _layer_norm(x, p["ln_f.weight"], p["ln_f.bias"])
        logits = (h @ p["tok_emb.weight"][: self._m.nc].T).astype(np.float64)
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        self._pending = (frame, layer)
        return floor_distribution(probs)

    def push(self, frame: int, layer: int, code: int) -> None:
        if self._pending is None:
            self._advance(frame, layer)
        elif self._pending != (frame, layer):
            raise ContextError(
                f"push at {(frame, layer)} does not match pending predict at {self._pending}"
            )
        self._pending = None
        self._prev_token = int(code)


class TransformerModel(TokenModel):
    kind = "transformer"

    def __init__(self, role: str, cfg: CodecConfig, arch: TransformerConfig,
                 params: dict[str, np.ndarray]):
        super().__init__(role, cfg)
        self.arch = arch
        self.params = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in params.items()}

    def session(self) -> TransformerSession:
        return TransformerSession(self)

    def _config_dict(self) -> dict:
        return {
            "codebook_size": self.cfg.codebook_size,
            "n_coarse": self.cfg.n_coarse,
            "n_fine": self.cfg.n_fine,
            "embed_dim": self.cfg.embed_dim,
            "arch": {
                "n_blocks": self.arch.n_blocks,
                "n_heads": self.arch.n_heads,
                "d_model": self.arch.d_model,
                "context_cap": self.arch.context_cap,
                "max_frames": self.arch.max_frames,
            },
        }

    def _param_blob(self) -> bytes:
        parts = [struct.pack("<I", len(self.params))]
        for name in sorted(self.params):
            arr = self.params[name]
            encoded = name.encode()
            parts.append(struct.pack("<H", len(encoded)))
            parts.append(encoded)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.astype("<f4").tobytes(order="C"))
        return b"".join(parts)


@register_kind("transformer")
def _load(role: str, config: dict, blob: bytes) -> TransformerModel:
    cfg = CodecConfig(
        codebook_size=config["codebook_size"],
        n_coarse=config["n_coarse"],
        n_fine=config["n_fine"],
        embed_dim=config["embed_dim"],
    )
    arch = TransformerConfig(**config["arch"])
    params: dict[str, np.ndarray] = {}
    (n_params,) = struct.unpack_from("<I", blob, 0)
    off = 4
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = arr.copy()
    return TransformerModel(role, cfg, arch, params)


# ---------------------------------------------------------------------------
# Training (torch only below this line)
# ---------------------------------------------------------------------------

def build_torch_model(cfg: CodecConfig, arch: TransformerConfig, seed: int):
    """Construct the torch twin of the numpy inference network."""
    import torch
    from torch import nn

    torch.manual_seed(seed)

    class Block(nn.Module):
        def __init__(self):
            super().__init__()
            d = arch.d_model
            self.ln1 = nn.LayerNorm(d)
            self.attn = nn.ModuleDict({
                "wq": nn.Linear(d, d), "wk": nn.Linear(d, d),
                "wv": nn.Linear(d, d), "wo": nn.Linear(d, d),
            })
            self.ln2 = nn.LayerNorm(d)
            self.mlp = nn.ModuleDict({
                "w1": nn.Linear(d, arch.d_ff), "w2": nn.Linear(arch.d_ff, d),
            })
            self.act = nn.GELU(approximate="tanh")

        def forward(self, x, mask):
            bsz, t, d = x.shape
            nh, hd = arch.n_heads, arch.head_dim
            h = self.ln1(x)
            q = self.attn["wq"](h).view(bsz, t, nh, hd).transpose(1, 2)
            k = self.attn["wk"](h).view(bsz, t, nh, hd).transpose(1, 2)
            v = self.attn["wv"](h).view(bsz, t, nh, hd).transpose(1, 2)
            scores = q @ k.transpose(-2, -1) / hd ** 0.5
            scores = scores.masked_fill(mask[None, None, :t, :t], float("-inf"))
            att = torch.softmax(scores, dim=-1) @ v
            att = att.transpose(1, 2).reshape(bsz, t, d)
            x = x + self.attn["wo"](att)
            h2 = self.ln2(x)
            return x + self.mlp["w2"](self.act(self.mlp["w1"](h2)))

    class Net(nn.Module):
        def __init__(self):
            super().__init__()
            d = arch.d_model
            self.tok_emb = nn.Embedding(cfg.codebook_size + 1, d)
            self.frame_emb = nn.Embedding(arch.max_frames, d)
            self.layer_emb = nn.Embedding(cfg.n_layers, d)
            self.blocks = nn.ModuleList(Block() for _ in range(arch.n_blocks))
            self.ln_f = nn.LayerNorm(d)
            for name, par in self.named_parameters():
                if name.endswith("bias"):
                    nn.init.zeros_(par)
                elif "ln" not in name:
                    nn.init.normal_(par, std=0.02)

        def forward(self, prev_tokens, frames, layers):
            t = prev_tokens.shape[1]
            mask = torch.triu(
                torch.ones(t, t, dtype=torch.bool, device=prev_tokens.device), 1
            )
            x = (
                self.tok_emb(prev_tokens)
                + self.frame_emb(frames % arch.max_frames)
                + self.layer_emb(layers - 1)
            )
            for block in self.blocks:
                x = block(x, mask)
            h = self.ln_f(x)
            return h @ self.tok_emb.weight[: cfg.codebook_size].T

    return Net()


def sequence_loss(net, cfg: CodecConfig, batch: dict):
    """Teacher-forced cross-entropy over the masked positions of a batch.

    Batch arrays: tokens/frames/layers of shape (B, T) and a boolean
    loss mask; the first input slot is the start token.
    """
    import torch

    tokens = torch.as_tensor(batch["tokens"], dtype=torch.long)
    frames = torch.as_tensor(batch["frames"], dtype=torch.long)
    layers = torch.as_tensor(batch["layers"], dtype=torch.long)
    mask = torch.as_tensor(batch["mask"], dtype=torch.bool)
    bos = torch.full((tokens.shape[0], 1), cfg.codebook_size, dtype=torch.long)
    prev = torch.cat([bos, tokens[:, :-1]], dim=1)
    logits = net(prev, frames, layers)
    return torch.nn.functional.cross_entropy(logits[mask], tokens[mask])


def _windows_from_grids(grids, role: str, cfg: CodecConfig, cap: int):
    """Flatten grids and split them at frame boundaries into crops that
    fit the context cap."""
    windows = []
    for grid in grids:
        layout = role_layout(grid.n_frames, cfg, role)
        tokens = np.array(
            [grid.codes[f, l - 1] for f, l in layout], dtype=np.int64
        )
        frames = layout[:, 0].astype(np.int64)
        layers = layout[:, 1].astype(np.int64)
        per_frame = cfg.n_layers if role == ROLE_FINE else cfg.n_coarse
        frames_per_window = max(1, cap // per_frame)
        step = frames_per_window * per_frame
        for start in range(0, tokens.size, step):
            sl = slice(start, start + step)
            if role == ROLE_FINE:
                mask = layers[sl] > cfg.n_coarse
            else:
                mask = np.ones(tokens[sl].size, dtype=bool)
            windows.append(
                {"tokens": tokens[sl], "frames": frames[sl], "layers": layers[sl], "mask": mask}
            )
    return windows


def _pad_batch(windows, picks):
    longest = max(windows[i]["tokens"].size for i in picks)
    batch = {
        "tokens": np.zeros((len(picks), longest), dtype=np.int64),
        "frames": np.zeros((len(picks), longest), dtype=np.int64),
        "layers": np.ones((len(picks), longest), dtype=np.int64),
        "mask": np.zeros((len(picks), longest), dtype=bool),
    }
    for row, i in enumerate(picks):
        w = windows[i]
        n = w["tokens"].size
        for field in ("tokens", "frames", "layers", "mask"):
            batch[field][row, :n] = w[field]
    return batch


def train_transformer(grids, role: str, cfg: CodecConfig | None = None,
                      arch: TransformerConfig | None = None, seed: int = 0,
                      loss_log: list | None = None) -> TransformerModel:
    """Train the causal transformer on frozen token grids.

    Fine-role training teacher-forces the coarse positions and applies
    the loss only to fine positions.  Deterministic for a fixed seed on
    one platform.  ``n_steps=0`` returns the seeded initialization,
    which is already a valid (if uninformed) model.
    """
    import torch

    grids = list(grids)
    if not grids:
        raise InsufficientData("no training grids supplied")
    if cfg is None:
        cfg = grids[0].config
    arch = arch or TransformerConfig()
    probe = TransformerModel(role, cfg, arch, {})
    for grid in grids:
        _check_grid_role(probe, grid)
    if cfg.n_layers > arch.context_cap:
        raise ShapeError("one frame of tokens exceeds the context cap")

    net = build_torch_model(cfg, arch, seed)
    windows = _windows_from_grids(grids, role, cfg, arch.context_cap)
    rng = np.random.default_rng(seed)
    optim = torch.optim.Adam(net.parameters(), lr=arch.learning_rate)
    net.train()
    for step in range(arch.n_steps):
        picks = rng.integers(0, len(windows), size=arch.batch_size)
        loss = sequence_loss(net, cfg, _pad_batch(windows, picks))
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss.item()} at step {step}")
        optim.zero_grad()
        loss.backward()
        optim.step()
        if loss_log is not None:
            loss_log.append(float(loss.item()))

    params = {
        name: par.detach().cpu().numpy().astype(np.float32)
        for name, par in net.state_dict().items()
    }
    return TransformerModel(role, cfg, arch, params)
