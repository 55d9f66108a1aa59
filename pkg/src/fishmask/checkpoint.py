"""Sparse delta checkpoints written during masked training.

Between two checkpoints only the coordinates of the active mask can move,
so a checkpoint stores just those (index, new value) pairs plus a hash link
to its predecessor. A base snapshot followed by the chain reconstructs the
live parameter vector exactly.

Binary layout (little-endian)::

    magic "FSHC" | u16 version | 2 pad | u64 n_params | u64 step | u64 mask_id
    | 32-byte base_ref | u64 k | k x u64 indices | k x f64 values
    | 32-byte SHA-256 of everything before it

The SHA-256 trailer doubles as the checkpoint's identity: the next
checkpoint's ``base_ref`` must equal it. The first checkpoint links to the
SHA-256 of the base snapshot's raw float64 bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write, write_json
from .data import Dataset, shuffle
from .errors import ChainError
from .fisher import DEFAULT_SAMPLES, compute_fisher
from .mask import SparseMask, build_fish_mask, build_random_mask, sparsity_to_k
from .model import ModelSpec, load_params, params_digest_bytes, save_params
from .seeding import int_seed, rng_for
from .trainer import TrainConfig, TrainMetrics, MetricRecorder, run_epochs

CKPT_MAGIC = b"FSHC"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sH2xQQQ32sQ")
HEADER_BYTES = _HEADER.size
CHECKSUM_BYTES = 32
FILE_OVERHEAD_BYTES = HEADER_BYTES + CHECKSUM_BYTES
MANIFEST_FORMAT = "fishmask-sparse-chain"


def base_digest(params: np.ndarray) -> bytes:
    return hashlib.sha256(params_digest_bytes(params)).digest()


@dataclass
class SparseCheckpoint:
    base_ref: bytes
    step: int
    mask_id: int
    indices: np.ndarray
    values: np.ndarray
    n_params: int
    _digest: bytes | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape:
            raise ValueError("indices and values differ in length")
        if self.indices.size > 1 and np.any(np.diff(self.indices) <= 0):
            raise ValueError("checkpoint indices must be strictly increasing")
        if len(self.base_ref) != 32:
            raise ValueError("base_ref must be a 32-byte digest")

    @property
    def k(self) -> int:
        return int(self.indices.size)

    def _body(self) -> bytes:
        header = _HEADER.pack(CKPT_MAGIC, CKPT_VERSION, self.n_params, self.step, self.mask_id,
                              self.base_ref, self.k)
        return header + self.indices.astype("<u8").tobytes() + self.values.astype("<f8").tobytes()

    def to_bytes(self) -> bytes:
        body = self._body()
        return body + hashlib.sha256(body).digest()

    @property
    def digest(self) -> bytes:
        if self._digest is None:
            self._digest = hashlib.sha256(self._body()).digest()
        return self._digest

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> SparseCheckpoint:
        if len(raw) < FILE_OVERHEAD_BYTES:
            raise ChainError(f"{source}: truncated checkpoint ({len(raw)} bytes)")
        body, checksum = raw[:-CHECKSUM_BYTES], raw[-CHECKSUM_BYTES:]
        if hashlib.sha256(body).digest() != checksum:
            raise ChainError(f"{source}: checksum mismatch")
        magic, version, n, step, mask_id, base_ref, k = _HEADER.unpack_from(body)
        if magic != CKPT_MAGIC:
            raise ChainError(f"{source}: bad magic {magic!r} at offset 0")
        if version != CKPT_VERSION:
            raise ChainError(f"{source}: unsupported version {version}")
        if len(body) != HEADER_BYTES + 16 * k:
            raise ChainError(f"{source}: size does not match k={k}")
        off = HEADER_BYTES
        idx = np.frombuffer(body, dtype="<u8", count=k, offset=off).astype(np.int64)
        vals = np.frombuffer(body, dtype="<f8", count=k, offset=off + 8 * k).astype(np.float64)
        return cls(base_ref, step, mask_id, idx, vals, n, checksum)


@dataclass(frozen=True)
class RefreshSchedule:
    """Recompute the mask every ``period_epochs`` epochs; ``None`` keeps it fixed."""

    period_epochs: int | None = None

    def __post_init__(self):
        if self.period_epochs is not None and self.period_epochs < 1:
            raise ValueError("refresh period must be >= 1 epoch")

    @classmethod
    def parse(cls, text: str | int | None) -> RefreshSchedule:
        if text is None or str(text).lower() == "fixed":
            return cls(None)
        return cls(int(text))

    @property
    def label(self) -> str:
        return "fixed" if self.period_epochs is None else str(self.period_epochs)

    def refresh_at(self, epoch: int) -> bool:
        if epoch == 0:
            return True
        return self.period_epochs is not None and epoch % self.period_epochs == 0


@dataclass
class CheckpointRun:
    params: np.ndarray
    chain: list[SparseCheckpoint]
    metrics: TrainMetrics
    masks: list[SparseMask]

    def __iter__(self):
        return iter((self.params, self.chain, self.metrics))


def select_mask(kind: str, spec: ModelSpec, params: np.ndarray, data: Dataset, k: int, seed: int,
                refresh: int = 0, fisher_samples: int = DEFAULT_SAMPLES,
                fisher_variant: str = "empirical") -> SparseMask:
    """Mask for one refresh interval, computed at the current parameters."""
    tag = () if refresh == 0 else (refresh,)
    if kind == "random":
        return build_random_mask(spec.n_params, k, int_seed(seed, "random-mask", *tag))
    if kind != "fish":
        raise ValueError(f"unknown mask kind {kind!r}")
    fdata = shuffle(data, int_seed(seed, "fisher", *tag))
    N = min(fisher_samples, len(fdata))
    fisher = compute_fisher(spec, params, fdata.X, fdata.y, N, fisher_variant,
                            seed=int_seed(seed, "fisher-draws", *tag))
    return build_fish_mask(fisher, k)


def train_with_sparse_checkpoints(spec: ModelSpec, params0: np.ndarray, train_data: Dataset,
                                  eval_data: Dataset | None, sparsity: float,
                                  schedule: RefreshSchedule, config: TrainConfig,
                                  mask_kind: str = "fish",
                                  fisher_samples: int = DEFAULT_SAMPLES,
                                  out_dir: str | os.PathLike | None = None) -> CheckpointRun:
    """Masked training with one sparse checkpoint per epoch.

    Each checkpoint stores the current values at every index of the mask
    active during that epoch. With ``out_dir`` the chain is also written to
    disk (base snapshot, one file per checkpoint, JSON manifest).
    """
    params0 = np.asarray(params0, dtype=np.float64)
    k = sparsity_to_k(spec.n_params, sparsity)
    rng = rng_for(config.seed, "train-shuffle")
    metrics = TrainMetrics()
    recorder = MetricRecorder(spec, params0, eval_data, metrics)
    params, step = params0.copy(), 0
    chain: list[SparseCheckpoint] = []
    masks: list[SparseMask] = []
    prev_ref = base_digest(params0)
    mask = None
    for epoch in range(config.epochs):
        if schedule.refresh_at(epoch):
            mask = select_mask(mask_kind, spec, params, train_data, k, config.seed, len(masks),
                               fisher_samples)
            masks.append(mask)
        params, step = run_epochs(spec, params, train_data, mask, config, rng, 1, recorder, step)
        ckpt = SparseCheckpoint(prev_ref, step, len(masks) - 1, mask.indices.copy(),
                                params[mask.indices], spec.n_params)
        chain.append(ckpt)
        prev_ref = ckpt.digest
    if out_dir is not None:
        write_chain(out_dir, params0, chain)
    return CheckpointRun(params, chain, metrics, masks)


def validate_chain(base: np.ndarray, checkpoints: list[SparseCheckpoint]) -> None:
    ref = base_digest(base)
    for i, ckpt in enumerate(checkpoints):
        if ckpt.n_params != base.size:
            raise ChainError(f"checkpoint {i} covers {ckpt.n_params} parameters, base has {base.size}")
        if ckpt.base_ref != ref:
            raise ChainError(f"checkpoint {i} (step {ckpt.step}) does not follow its predecessor")
        if ckpt.k and (ckpt.indices[0] < 0 or ckpt.indices[-1] >= base.size):
            raise ChainError(f"checkpoint {i} has indices out of range")
        ref = ckpt.digest


def reconstruct(base: np.ndarray, checkpoints: list[SparseCheckpoint]) -> np.ndarray:
    """Replay a validated chain onto a copy of ``base``."""
    base = np.asarray(base, dtype=np.float64)
    validate_chain(base, checkpoints)
    out = base.copy()
    for ckpt in checkpoints:
        out[ckpt.indices] = ckpt.values
    return out


def storage_cost(checkpoint: SparseCheckpoint | int, value_bytes: int = 4, index_bytes: int = 4,
                 header_bytes: int = FILE_OVERHEAD_BYTES) -> int:
    """Bytes for one sparse checkpoint under the given unit sizes.

    ``checkpoint`` may be a checkpoint or a bare entry count.
    """
    if value_bytes <= 0 or index_bytes <= 0 or header_bytes < 0:
        raise ValueError("unit sizes must be positive")
    k = checkpoint.k if isinstance(checkpoint, SparseCheckpoint) else int(checkpoint)
    return k * (value_bytes + index_bytes) + header_bytes


def dense_storage_cost(n_params: int, value_bytes: int = 4, header_bytes: int = 0) -> int:
    return n_params * value_bytes + header_bytes


def reduction_factor(chain: list[SparseCheckpoint], n_params: int, value_bytes: int = 4,
                     index_bytes: int = 4, header_bytes: int = 0) -> float:
    """Dense over sparse storage for the whole chain; default is pure payload accounting."""
    dense = len(chain) * dense_storage_cost(n_params, value_bytes, header_bytes)
    sparse = sum(storage_cost(c, value_bytes, index_bytes, header_bytes) for c in chain)
    return dense / sparse


def checkpoint_filename(i: int) -> str:
    return f"ckpt_{i:05d}.fshc"


def write_chain(out_dir: str | os.PathLike, base: np.ndarray, chain: list[SparseCheckpoint]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_params(out_dir / "base.params", base)
    entries = []
    for i, ckpt in enumerate(chain):
        name = checkpoint_filename(i)
        atomic_write(out_dir / name, ckpt.to_bytes())
        entries.append({"file": name, "step": ckpt.step, "mask_id": ckpt.mask_id, "k": ckpt.k,
                        "base_ref": ckpt.base_ref.hex(), "digest": ckpt.digest.hex()})
    manifest = {"format": MANIFEST_FORMAT, "version": CKPT_VERSION, "n_params": int(base.size),
                "base": {"file": "base.params", "digest": base_digest(base).hex()},
                "checkpoints": entries}
    path = out_dir / "manifest.json"
    write_json(path, manifest)
    return path


def read_checkpoint(path: str | os.PathLike) -> SparseCheckpoint:
    return SparseCheckpoint.from_bytes(Path(path).read_bytes(), str(path))


def load_chain(manifest_path: str | os.PathLike) -> tuple[np.ndarray, list[SparseCheckpoint]]:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ChainError(f"{manifest_path}: not a checkpoint chain manifest")
    root = manifest_path.parent
    base = load_params(root / manifest["base"]["file"])
    if base_digest(base).hex() != manifest["base"]["digest"]:
        raise ChainError(f"{manifest_path}: base snapshot digest mismatch")
    chain = [read_checkpoint(root / e["file"]) for e in manifest["checkpoints"]]
    return base, chain


def chain_disk_bytes(manifest_path: str | os.PathLike) -> int:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    return sum((manifest_path.parent / e["file"]).stat().st_size for e in manifest["checkpoints"])
