"""Morphology-conditioned transformer: per-limb tokens, path-keyed position
embeddings, Pre-LN self-attention blocks, per-stage action heads, and
per-stage value stacks that read the root token.

The path registry maps each limb's root path (child-slot sequence) to a row
of one shared embedding table. Rows are allocated lazily in encounter order
and start at zero, so a rollout that falls back to the reserved zero row for
an unseen path is numerically identical to the learner's forward after the
row is allocated. Workers run with allocation disabled and queue misses.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .config import NetConfig

STAGE_NAMES = ("topo", "attr", "ctrl")
HEAD_DIMS = {"topo": 3, "attr": 4, "ctrl": 1}
GAUSSIAN_DIMS = {"attr": 4, "ctrl": 1}


class RegistryError(RuntimeError):
    pass


class TopoRegistry:
    """Injective map from topology paths to embedding rows.

    Row 0 is reserved as the all-zero fallback for paths unseen at rollout
    time; real allocations start at row 1 and persist for the whole run.
    """

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.table = nc.param(np.zeros((capacity, dim)))
        self.rows: dict[tuple, int] = {}
        self._order: list[tuple] = []

    def lookup(self, path) -> int | None:
        return self.rows.get(tuple(path))

    def allocate(self, path) -> int:
        path = tuple(path)
        row = self.rows.get(path)
        if row is not None:
            return row
        row = 1 + len(self._order)
        if row >= self.capacity:
            raise RegistryError(
                f"registry capacity {self.capacity} exhausted allocating {path}")
        self.rows[path] = row
        self._order.append(path)
        return row

    def n_allocated(self) -> int:
        return len(self._order)

    def allocated_paths(self) -> list[tuple]:
        return list(self._order)

    def snapshot_map(self) -> dict[tuple, int]:
        return dict(self.rows)

    def load_map(self, rows: dict[tuple, int]) -> None:
        items = sorted(rows.items(), key=lambda kv: kv[1])
        self.rows = {}
        self._order = []
        for path, row in items:
            if row != 1 + len(self._order):
                raise RegistryError("registry rows must be contiguous from 1")
            self.rows[tuple(path)] = row
            self._order.append(tuple(path))


class _Linear:
    def __init__(self, store, prefix, fan_in, fan_out, rng):
        self.w = nc.param(nc.init_uniform((fan_in, fan_out), fan_in, rng))
        self.b = nc.param(np.zeros(fan_out))
        store[f"{prefix}/w"] = self.w
        store[f"{prefix}/b"] = self.b

    def __call__(self, x):
        return nc.linear(x, self.w, self.b)


class _LayerNorm:
    def __init__(self, store, prefix, dim):
        self.g = nc.param(np.ones(dim))
        self.b = nc.param(np.zeros(dim))
        store[f"{prefix}/g"] = self.g
        store[f"{prefix}/b"] = self.b

    def __call__(self, x):
        return nc.layer_norm(x, self.g, self.b)


class _Block:
    def __init__(self, store, prefix, dim, heads, ratio, rng):
        self.dim = dim
        self.heads = heads
        self.ln1 = _LayerNorm(store, f"{prefix}/ln1", dim)
        self.wq = _Linear(store, f"{prefix}/q", dim, dim, rng)
        self.wk = _Linear(store, f"{prefix}/k", dim, dim, rng)
        self.wv = _Linear(store, f"{prefix}/v", dim, dim, rng)
        self.wo = _Linear(store, f"{prefix}/o", dim, dim, rng)
        self.ln2 = _LayerNorm(store, f"{prefix}/ln2", dim)
        self.ff1 = _Linear(store, f"{prefix}/ff1", dim, dim * ratio, rng)
        self.ff2 = _Linear(store, f"{prefix}/ff2", dim * ratio, dim, rng)

    def _split_heads(self, t, b, l):
        dk = self.dim // self.heads
        t = nc.reshape(t, (b, l, self.heads, dk))
        t = nc.transpose(t, (0, 2, 1, 3))
        return nc.reshape(t, (b * self.heads, l, dk))

    def __call__(self, x, mask=None, capture=None):
        b, l, _ = x.data.shape
        dk = self.dim // self.heads
        h = self.ln1(x)
        q = self._split_heads(self.wq(h), b, l)
        k = self._split_heads(self.wk(h), b, l)
        v = self._split_heads(self.wv(h), b, l)
        scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
        if mask is not None:
            scores = nc.add_const(scores, np.repeat(mask, self.heads, axis=0))
        attn = nc.softmax_rows(scores)
        if capture is not None:
            capture.append(attn.data.reshape(b, self.heads, l, l).copy())
        mixed = nc.matmul(attn, v)
        mixed = nc.reshape(mixed, (b, self.heads, l, dk))
        mixed = nc.transpose(mixed, (0, 2, 1, 3))
        mixed = nc.reshape(mixed, (b, l, self.dim))
        x = nc.add(x, self.wo(mixed))
        y = self.ln2(x)
        y = self.ff2(nc.silu(self.ff1(y)))
        return nc.add(x, y)


class _Trunk:
    """Shared projection + position embedding + N blocks + final norm."""

    def __init__(self, store, prefix, cfg: NetConfig, dim, n_blocks, rng):
        self.proj = _Linear(store, f"{prefix}/proj", cfg.d_obs, dim, rng)
        self.blocks = [
            _Block(store, f"{prefix}/block{i}", dim, cfg.n_heads, cfg.ffn_ratio, rng)
            for i in range(n_blocks)]
        self.final = _LayerNorm(store, f"{prefix}/final", dim)

    def __call__(self, obs, rows, table, mask=None, capture=None):
        x = nc.add(self.proj(obs), nc.embedding(table, rows))
        for block in self.blocks:
            x = block(x, mask=mask, capture=capture)
        return self.final(x)


class PaddedBatch:
    """Equal-length padded observations plus the real/padded indicator matrix."""

    def __init__(self, states: np.ndarray, pad: np.ndarray, limb_counts):
        self.states = states
        self.pad = pad
        self.limb_counts = list(limb_counts)

    @classmethod
    def from_items(cls, obs_list):
        counts = [o.shape[0] for o in obs_list]
        lm = max(counts)
        b = len(obs_list)
        d = obs_list[0].shape[1]
        states = np.zeros((b, lm, d))
        pad = np.zeros((b, lm))
        for i, o in enumerate(obs_list):
            states[i, :counts[i]] = o
            pad[i, :counts[i]] = 1.0
        return cls(states, pad, counts)

    def attention_mask(self) -> np.ndarray | None:
        """Additive (B, 1, L) mask: 0 on real slots, -inf on padded ones."""
        if all(c == self.states.shape[1] for c in self.limb_counts):
            return None
        mask = np.where(self.pad > 0.5, 0.0, -np.inf)
        return mask[:, None, :]


class MorphNet:
    """Policy trunk(s) with per-stage heads plus three per-stage value stacks."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        if cfg.value_d_model != cfg.d_model:
            raise ValueError("value_d_model must equal d_model (shared path embeddings)")
        self.cfg = cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x6E65])))
        self.params: dict[str, nc.Tensor] = {}
        self.registry = TopoRegistry(cfg.registry_capacity, cfg.d_model)
        self.params["embed/table"] = self.registry.table
        if cfg.share_policy_trunk:
            shared = _Trunk(self.params, "policy/trunk", cfg, cfg.d_model, cfg.n_blocks, rng)
            self.trunks = {s: shared for s in STAGE_NAMES}
        else:
            self.trunks = {s: _Trunk(self.params, f"policy/trunk_{s}", cfg,
                                     cfg.d_model, cfg.n_blocks, rng)
                           for s in STAGE_NAMES}
        self.heads = {s: _Linear(self.params, f"policy/head/{s}", cfg.d_model,
                                 HEAD_DIMS[s], rng) for s in STAGE_NAMES}
        self.logstds = {s: nc.param(np.zeros(GAUSSIAN_DIMS[s])) for s in GAUSSIAN_DIMS}
        for s, t in self.logstds.items():
            self.params[f"policy/logstd/{s}"] = t
        self.value_trunks = {s: _Trunk(self.params, f"value/{s}", cfg,
                                       cfg.value_d_model, cfg.value_n_blocks, rng)
                             for s in STAGE_NAMES}
        self.value_heads = {s: _Linear(self.params, f"value/{s}/head",
                                       cfg.value_d_model, 1, rng) for s in STAGE_NAMES}
        self.alloc_on_miss = True
        self.miss_queue: set[tuple] = set()
        self.captured_attention: list[np.ndarray] | None = None

    # -- registry ---------------------------------------------------------------

    def rows_for(self, paths) -> np.ndarray:
        """Resolve paths to embedding rows; queue misses when not allocating."""
        rows = np.zeros(len(paths), dtype=np.intp)
        for i, path in enumerate(paths):
            row = self.registry.lookup(path)
            if row is None:
                if self.alloc_on_miss:
                    row = self.registry.allocate(path)
                else:
                    self.miss_queue.add(tuple(path))
                    row = 0
            rows[i] = row
        return rows

    def sync_misses(self) -> int:
        """Allocate queued paths (learner side); returns how many were new."""
        added = 0
        for path in sorted(self.miss_queue):
            if self.registry.lookup(path) is None:
                self.registry.allocate(path)
                added += 1
        self.miss_queue.clear()
        return added

    # -- forward passes -----------------------------------------------------------

    def _stage_name(self, stage) -> str:
        return STAGE_NAMES[int(stage)] if not isinstance(stage, str) else stage

    def policy_tokens(self, obs3: np.ndarray, rows: np.ndarray, stage, mask=None):
        name = self._stage_name(stage)
        capture = [] if self.captured_attention is not None else None
        tokens = self.trunks[name](nc.tensor(obs3), rows, self.registry.table,
                                   mask=mask, capture=capture)
        if capture is not None:
            self.captured_attention = capture
        return tokens

    def policy_head_out(self, obs3, rows, stage, mask=None):
        name = self._stage_name(stage)
        return self.heads[name](self.policy_tokens(obs3, rows, stage, mask=mask))

    def value_out(self, obs3, rows, stage, mask=None):
        """Per-item scalar value read from the root token (index 0)."""
        name = self._stage_name(stage)
        tokens = self.value_trunks[name](nc.tensor(obs3), rows, self.registry.table,
                                         mask=mask)
        root = nc.take(tokens, np.array([0]), axis=1)  # (B, 1, D)
        out = self.value_heads[name](root)             # (B, 1, 1)
        return nc.reshape(out, (obs3.shape[0],))

    def forward_single(self, obs: np.ndarray, paths, stage):
        """Head outputs (L, out_dim) and the root-token value, without gradients."""
        rows = self.rows_for(paths)
        with nc.no_grad():
            head = self.policy_head_out(obs[None, :, :], rows[None, :], stage)
            value = self.value_out(obs[None, :, :], rows[None, :], stage)
        return head.data[0], float(value.data[0])

    def policy_single(self, obs: np.ndarray, paths, stage) -> np.ndarray:
        """Rollout fast path: head outputs only, no value stack, no gradients."""
        rows = self.rows_for(paths)
        with nc.no_grad():
            head = self.policy_head_out(obs[None, :, :], rows[None, :], stage)
        return head.data[0]

    def policy_batch(self, obs_list, paths_list, stage) -> list[np.ndarray]:
        """Lockstep rollout forward over several episodes; trimmed per item."""
        batch = PaddedBatch.from_items(obs_list)
        b, lm, _ = batch.states.shape
        rows = np.zeros((b, lm), dtype=np.intp)
        for i, paths in enumerate(paths_list):
            rows[i, :len(paths)] = self.rows_for(paths)
        with nc.no_grad():
            head = self.policy_head_out(batch.states, rows, stage,
                                        mask=batch.attention_mask())
        return [head.data[i, :c] for i, c in enumerate(batch.limb_counts)]

    def forward_batch(self, batch: PaddedBatch, paths_list, stage):
        """Padded batch forward; padded attention columns get exact -inf scores.

        Returns (head outputs (B, L_m, out), values (B,), per-item trimmed
        outputs selected by the pad matrix).
        """
        b, lm, _ = batch.states.shape
        rows = np.zeros((b, lm), dtype=np.intp)
        for i, paths in enumerate(paths_list):
            rows[i, :len(paths)] = self.rows_for(paths)
        mask = batch.attention_mask()
        with nc.no_grad():
            head = self.policy_head_out(batch.states, rows, stage, mask=mask)
            value = self.value_out(batch.states, rows, stage, mask=mask)
        trimmed = [head.data[i, :c] for i, c in enumerate(batch.limb_counts)]
        return head.data, value.data, trimmed

    # -- parameter bookkeeping -------------------------------------------------------

    def policy_param_names(self):
        return [n for n in self.params if n.startswith(("policy/", "embed/"))]

    def value_param_names(self):
        return [n for n in self.params if n.startswith("value/")]

    def param_list(self, names):
        return [self.params[n] for n in names]

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def component_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for name, p in self.params.items():
            key = "/".join(name.split("/")[:2])
            counts[key] = counts.get(key, 0) + p.data.size
        return counts

    def snapshot(self) -> dict:
        return {
            "params": {n: p.data.copy() for n, p in self.params.items()},
            "registry": self.registry.snapshot_map(),
        }

    def load_snapshot(self, snap: dict) -> None:
        for name, arr in snap["params"].items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name}")
            if self.params[name].data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}")
            self.params[name].data[...] = arr
        self.registry.load_map(snap["registry"])
