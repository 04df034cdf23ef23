"""Clip-to-embedding backends and a persistent on-disk embedding cache.

Backends share one contract: a conforming clip (16 kHz, 32000 samples) maps to a
finite 512-dimensional vector. The mock backend is pure and seed-deterministic;
the foundation backend adapts an external TorchScript encoder whose weights are
resolved from LUNGSOUND_ENCODER_WEIGHTS.

Cache format (one binary file per shard):
    header: magic "PVEC1", format version u8, backend_id and backend version as
            length-prefixed UTF-8, embedding dim u16 (512)
    record: 32-byte key digest, 512 little-endian float32, crc32 of digest+payload
A torn trailing record is ignored with a warning; a record failing its checksum is
treated as absent.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dsp
from .dsp import CLIP_SAMPLES, TARGET_SAMPLE_RATE, Waveform
from .errors import BackendUnavailableError, ContractError, DataError

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 512

CACHE_MAGIC = b"PVEC1"
_CACHE_FORMAT_VERSION = 1
_DIGEST_BYTES = 32
_PAYLOAD_BYTES = EMBEDDING_DIM * 4
_RECORD_BYTES = _DIGEST_BYTES + _PAYLOAD_BYTES + 4

WEIGHTS_ENV_VAR = "LUNGSOUND_ENCODER_WEIGHTS"


def validate_clip(clip: Waveform) -> None:
    if clip.sample_rate != TARGET_SAMPLE_RATE:
        raise ContractError(
            f"clip sample rate {clip.sample_rate} != {TARGET_SAMPLE_RATE}"
        )
    if len(clip.samples) != CLIP_SAMPLES:
        raise ContractError(f"clip length {len(clip.samples)} != {CLIP_SAMPLES}")
    if not np.all(np.isfinite(clip.samples)):
        raise ContractError("clip contains non-finite samples")


class EncoderBackend:
    """Base class for clip encoders. Subclasses set backend_id, version,
    trainable, deterministic and implement _embed_batch.
    """

    backend_id: str = "abstract"
    trainable: bool = False
    deterministic: bool = True
    dim: int = EMBEDDING_DIM

    @property
    def version(self) -> str:
        raise NotImplementedError

    def _embed_batch(self, clips: Sequence[Waveform]) -> np.ndarray:
        raise NotImplementedError

    def embed_batch(self, clips: Sequence[Waveform]) -> np.ndarray:
        for clip in clips:
            validate_clip(clip)
        out = np.atleast_2d(np.asarray(self._embed_batch(clips), dtype=np.float32))
        if out.shape != (len(clips), self.dim):
            raise ContractError(
                f"backend {self.backend_id} returned shape {out.shape}, "
                f"expected {(len(clips), self.dim)}"
            )
        if not np.all(np.isfinite(out)):
            raise ContractError(f"backend {self.backend_id} produced non-finite embeddings")
        return out

    def embed(self, clip: Waveform) -> np.ndarray:
        return self.embed_batch([clip])[0]

    def parameter_checksum(self) -> str:
        raise NotImplementedError

    def apply_embedding_gradients(self, clips: Sequence[Waveform],
                                  grad_embeddings: np.ndarray, lr: float) -> None:
        """Gradient step on encoder parameters given dL/d(embedding) rows."""
        raise ContractError(f"backend {self.backend_id} is frozen")


class MockEncoder(EncoderBackend):
    """Deterministic stand-in encoder: an interpretable spectral feature bank
    (32 mel-band log energies, zero-crossing rate, spectral centroid, spectral
    flatness, RMS) pushed through a seeded random projection to 512 dims.

    The projection matrix is the backend's only parameter tensor; in trainable
    mode apply_embedding_gradients updates it, which is enough to exercise the
    end-to-end fine-tuning path without external weights.
    """

    backend_id = "mock"
    N_MEL_BANDS = 32
    N_FEATURES = N_MEL_BANDS + 4

    def __init__(self, seed: int = 0, trainable: bool = False):
        self.seed = int(seed)
        self.trainable = bool(trainable)
        rng = np.random.default_rng(self.seed)
        self._projection = rng.standard_normal((self.dim, self.N_FEATURES)) / np.sqrt(self.N_FEATURES)
        self._feature_memo: dict[bytes, np.ndarray] = {}
        self._n_updates = 0

    @property
    def version(self) -> str:
        return f"1-seed{self.seed}"

    def compute_features(self, clip: Waveform) -> np.ndarray:
        """36-entry feature bank. Centroid is scaled by Nyquist to keep the
        entries on comparable magnitudes.
        """
        digest = hashlib.sha256(np.ascontiguousarray(clip.samples).tobytes()).digest()
        memo = self._feature_memo.get(digest)
        if memo is not None:
            return memo
        feats = np.empty(self.N_FEATURES)
        feats[: self.N_MEL_BANDS] = dsp.log_mel_energies(clip, n_mels=self.N_MEL_BANDS)
        feats[self.N_MEL_BANDS] = dsp.zero_crossing_rate(clip.samples)
        feats[self.N_MEL_BANDS + 1] = dsp.spectral_centroid(clip) / (clip.sample_rate / 2.0)
        feats[self.N_MEL_BANDS + 2] = dsp.spectral_flatness(clip)
        feats[self.N_MEL_BANDS + 3] = dsp.rms_energy(clip.samples)
        self._feature_memo[digest] = feats
        return feats

    def _embed_batch(self, clips: Sequence[Waveform]) -> np.ndarray:
        features = np.stack([self.compute_features(c) for c in clips])
        return (features @ self._projection.T).astype(np.float32)

    def parameter_checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self._projection).tobytes()).hexdigest()

    def apply_embedding_gradients(self, clips, grad_embeddings, lr):
        if not self.trainable:
            raise ContractError("mock backend constructed with trainable=False is frozen")
        grad = np.asarray(grad_embeddings, dtype=np.float64)
        if grad.shape != (len(clips), self.dim):
            raise ContractError(f"gradient shape {grad.shape} != {(len(clips), self.dim)}")
        features = np.stack([self.compute_features(c) for c in clips])
        # embedding = P @ f, so dL/dP = sum_i g_i outer f_i
        self._projection -= lr * (grad.T @ features)
        self._n_updates += 1

    def get_state(self) -> dict:
        return {"projection": self._projection.copy(), "seed": self.seed}

    def set_state(self, state: dict) -> None:
        proj = np.asarray(state["projection"], dtype=np.float64)
        if proj.shape != self._projection.shape:
            raise ContractError(f"projection shape {proj.shape} != {self._projection.shape}")
        self._projection = proj.copy()


class FoundationEncoder(EncoderBackend):
    """Adapter over an external pretrained audio encoder exported as TorchScript.

    Weights are never vendored; the file path comes from the constructor or the
    LUNGSOUND_ENCODER_WEIGHTS environment variable. The module must map a
    (batch, 32000) float32 tensor to (batch, 512).
    """

    backend_id = "foundation"
    trainable = True
    deterministic = True

    def __init__(self, weights_path: Optional[Path] = None):
        path = weights_path or os.environ.get(WEIGHTS_ENV_VAR)
        if not path:
            raise BackendUnavailableError(
                f"foundation encoder weights not configured; set {WEIGHTS_ENV_VAR} "
                "to a TorchScript file mapping (batch, 32000) float32 to (batch, 512)"
            )
        path = Path(path)
        if not path.exists():
            raise BackendUnavailableError(f"foundation encoder weights not found: {path}")
        try:
            import torch
        except ImportError:
            raise BackendUnavailableError(
                "the foundation backend needs the torch package; install it or use "
                "the mock backend"
            ) from None
        self._torch = torch
        self._module = torch.jit.load(str(path), map_location="cpu")
        self._module.eval()
        self._version = hashlib.sha256(path.read_bytes()).hexdigest()[:16]

    @property
    def version(self) -> str:
        return self._version

    def _embed_batch(self, clips):
        torch = self._torch
        batch = torch.tensor(
            np.stack([c.samples for c in clips]).astype(np.float32)
        )
        with torch.no_grad():
            out = self._module(batch)
        return out.detach().cpu().numpy()

    def parameter_checksum(self) -> str:
        h = hashlib.sha256()
        for p in self._module.parameters():
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def apply_embedding_gradients(self, clips, grad_embeddings, lr):
        torch = self._torch
        batch = torch.tensor(np.stack([c.samples for c in clips]).astype(np.float32))
        grad = torch.tensor(np.asarray(grad_embeddings, dtype=np.float32))
        params = [p for p in self._module.parameters() if p.requires_grad]
        if not params:
            return
        out = self._module(batch)
        # surrogate whose gradient wrt parameters equals the chain-rule product
        surrogate = (out * grad).sum()
        grads = torch.autograd.grad(surrogate, params, allow_unused=True)
        with torch.no_grad():
            for p, g in zip(params, grads):
                if g is not None:
                    p -= lr * g


def get_backend(name: str, seed: int = 0, trainable: bool = False,
                weights_path: Optional[Path] = None) -> EncoderBackend:
    if name == "mock":
        return MockEncoder(seed=seed, trainable=trainable)
    if name == "foundation":
        return FoundationEncoder(weights_path=weights_path)
    raise DataError(f"unknown encoder backend {name!r}; available: ['mock', 'foundation']")


# ---------------------------------------------------------------------------
# Embedding cache
# ---------------------------------------------------------------------------

def clip_cache_key(record_id: str, start_ms: int, end_ms: int,
                   margin: float, duration_s: float) -> tuple:
    """Identity of a prepared clip: source event window plus extraction params."""
    return (str(record_id), int(start_ms), int(end_ms), float(margin), float(duration_s))


def key_digest(clip_key: tuple, backend_id: str, backend_version: str) -> bytes:
    payload = json.dumps(
        {"clip": list(clip_key), "backend": backend_id, "version": backend_version},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    return hashlib.sha256(payload).digest()


class EmbeddingCache:
    """Append-only sharded embedding store with crc-checked fixed-width records.

    Concurrency: shared fcntl lock for readers, exclusive for writers; appends
    are single writes so a crashed writer can at worst leave one torn trailing
    record, which readers skip.
    """

    def __init__(self, directory: Path, backend_id: str = "",
                 backend_version: str = "", n_shards: int = 16):
        if n_shards < 1:
            raise DataError(f"n_shards must be >= 1, got {n_shards}")
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.backend_id = backend_id
        self.backend_version = backend_version
        self.n_shards = n_shards
        self._index: dict[bytes, tuple[int, int]] = {}  # digest -> (shard, offset)
        self._loaded: set[int] = set()

    @classmethod
    def for_backend(cls, directory: Path, backend: EncoderBackend,
                    n_shards: int = 16) -> "EmbeddingCache":
        return cls(directory, backend.backend_id, backend.version, n_shards)

    def _shard_path(self, shard: int) -> Path:
        return self.directory / f"shard-{shard:02d}.bin"

    def _shard_of(self, digest: bytes) -> int:
        return digest[0] % self.n_shards

    def _header_bytes(self) -> bytes:
        bid = self.backend_id.encode()
        ver = self.backend_version.encode()
        return b"".join([
            CACHE_MAGIC,
            struct.pack("<B", _CACHE_FORMAT_VERSION),
            struct.pack("<H", len(bid)), bid,
            struct.pack("<H", len(ver)), ver,
            struct.pack("<H", EMBEDDING_DIM),
        ])

    @staticmethod
    def _read_header(fh, path: Path) -> int:
        """Validate the header and return the offset where records begin."""
        magic = fh.read(len(CACHE_MAGIC))
        if magic != CACHE_MAGIC:
            raise DataError(f"{path}: not an embedding cache shard (bad magic {magic!r})")
        fmt = struct.unpack("<B", fh.read(1))[0]
        if fmt != _CACHE_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported cache format version {fmt}")
        bid_len = struct.unpack("<H", fh.read(2))[0]
        fh.read(bid_len)
        ver_len = struct.unpack("<H", fh.read(2))[0]
        fh.read(ver_len)
        dim = struct.unpack("<H", fh.read(2))[0]
        if dim != EMBEDDING_DIM:
            raise DataError(f"{path}: cache dimension {dim} != {EMBEDDING_DIM}")
        return fh.tell()

    def _load_shard(self, shard: int) -> None:
        if shard in self._loaded:
            return
        self._loaded.add(shard)
        path = self._shard_path(shard)
        if not path.exists():
            return
        import fcntl

        with open(path, "rb") as fh:
            fcntl.flock(fh, fcntl.LOCK_SH)
            try:
                start = self._read_header(fh, path)
                fh.seek(0, os.SEEK_END)
                end = fh.tell()
                n_records, leftover = divmod(end - start, _RECORD_BYTES)
                if leftover:
                    logger.warning("%s: ignoring %d-byte torn trailing record", path, leftover)
                fh.seek(start)
                for i in range(n_records):
                    offset = start + i * _RECORD_BYTES
                    digest = fh.read(_DIGEST_BYTES)
                    fh.seek(_PAYLOAD_BYTES + 4, os.SEEK_CUR)
                    self._index[digest] = (shard, offset)
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def digest_for(self, clip_key: tuple) -> bytes:
        return key_digest(clip_key, self.backend_id, self.backend_version)

    def get(self, digest: bytes) -> Optional[np.ndarray]:
        shard = self._shard_of(digest)
        self._load_shard(shard)
        loc = self._index.get(digest)
        if loc is None:
            return None
        import fcntl

        path = self._shard_path(loc[0])
        with open(path, "rb") as fh:
            fcntl.flock(fh, fcntl.LOCK_SH)
            try:
                fh.seek(loc[1])
                record = fh.read(_RECORD_BYTES)
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        if len(record) < _RECORD_BYTES:
            logger.warning("%s: truncated record at offset %d", path, loc[1])
            return None
        payload = record[:_DIGEST_BYTES + _PAYLOAD_BYTES]
        (stored_crc,) = struct.unpack("<I", record[-4:])
        if zlib.crc32(payload) != stored_crc:
            logger.warning("%s: checksum mismatch at offset %d, entry ignored", path, loc[1])
            return None
        vec = np.frombuffer(record[_DIGEST_BYTES:_DIGEST_BYTES + _PAYLOAD_BYTES],
                            dtype="<f4").copy()
        return vec

    def put(self, digest: bytes, vector: np.ndarray) -> None:
        vec = np.ascontiguousarray(vector, dtype="<f4")
        if vec.shape != (EMBEDDING_DIM,):
            raise ContractError(f"cache expects shape ({EMBEDDING_DIM},), got {vec.shape}")
        if len(digest) != _DIGEST_BYTES:
            raise ContractError(f"digest must be {_DIGEST_BYTES} bytes")
        shard = self._shard_of(digest)
        self._load_shard(shard)
        if digest in self._index:
            return
        payload = digest + vec.tobytes()
        record = payload + struct.pack("<I", zlib.crc32(payload))
        import fcntl

        path = self._shard_path(shard)
        with open(path, "ab") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            try:
                fh.seek(0, os.SEEK_END)
                if fh.tell() == 0:
                    fh.write(self._header_bytes())
                offset = fh.tell()
                fh.write(record)
                fh.flush()
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)
        self._index[digest] = (shard, offset)

    def __len__(self) -> int:
        for shard in range(self.n_shards):
            self._load_shard(shard)
        return len(self._index)
