"""Toy environments (point mass, 2-link reacher), rendering, random data
collection and the DPND episode file format."""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import RenderConfig

POINTMASS = "pointmass"
REACHER = "reacher"
ENV_KINDS = (POINTMASS, REACHER)
ENV_CODES = {POINTMASS: 0, REACHER: 1}
ACTION_DIM = 2

POINTMASS_STEP = 0.1
REACHER_STEP = 0.15
LINKS = (0.5, 0.4)
DISTRACTOR_STEP = 0.1


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnvState:
    """Agent coordinates (position or joint angles) plus an optional distractor position."""

    kind: str
    agent: np.ndarray
    distractor: np.ndarray | None = None

    def vector(self) -> np.ndarray:
        parts = [self.agent] if self.distractor is None else [self.agent, self.distractor]
        return np.concatenate(parts).astype(np.float64)

    @classmethod
    def from_vector(cls, kind: str, vec) -> "EnvState":
        vec = np.asarray(vec, dtype=np.float64)
        if kind not in ENV_KINDS:
            raise ValueError(f"unknown environment kind {kind!r}")
        if vec.shape not in ((2,), (4,)):
            raise ValueError(f"state vector must have 2 or 4 entries, got {vec.shape}")
        return cls(kind, vec[:2].copy(), vec[2:].copy() if vec.shape[0] == 4 else None)


def _clip_action(a) -> np.ndarray:
    return np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)


def wrap_angle(theta):
    return (np.asarray(theta, dtype=np.float64) + np.pi) % (2 * np.pi) - np.pi


def pointmass_step(s: EnvState, a) -> EnvState:
    p = np.clip(s.agent + POINTMASS_STEP * _clip_action(a), -1.0, 1.0)
    return EnvState(s.kind, p, s.distractor)


def reacher_step(s: EnvState, a) -> EnvState:
    return EnvState(s.kind, wrap_angle(s.agent + REACHER_STEP * _clip_action(a)), s.distractor)


def reacher_end_effector(s: EnvState | np.ndarray) -> np.ndarray:
    t1, t2 = (s.agent if isinstance(s, EnvState) else np.asarray(s))[:2]
    l1, l2 = LINKS
    return np.array([l1 * np.cos(t1) + l2 * np.cos(t1 + t2),
                     l1 * np.sin(t1) + l2 * np.sin(t1 + t2)])


def step(s: EnvState, a) -> EnvState:
    if s.kind == POINTMASS:
        return pointmass_step(s, a)
    if s.kind == REACHER:
        return reacher_step(s, a)
    raise ValueError(f"unknown environment kind {s.kind!r}")


def true_distance(s1: EnvState, s2: EnvState) -> float:
    """Point mass: position distance. Reacher: end-effector distance."""
    if s1.kind != s2.kind:
        raise ValueError(f"cannot compare a {s1.kind} state with a {s2.kind} state")
    if s1.kind == POINTMASS:
        return float(np.linalg.norm(s1.agent - s2.agent))
    return float(np.linalg.norm(reacher_end_effector(s1) - reacher_end_effector(s2)))


def random_state(kind: str, rng: np.random.Generator, distractor: bool = False) -> EnvState:
    if kind == POINTMASS:
        agent = rng.uniform(-1.0, 1.0, size=2)
    elif kind == REACHER:
        agent = rng.uniform(-np.pi, np.pi, size=2)
    else:
        raise ValueError(f"unknown environment kind {kind!r}")
    d = rng.uniform(-1.0, 1.0, size=2) if distractor else None
    return EnvState(kind, agent, d)


def move_distractor(s: EnvState, rng: np.random.Generator) -> EnvState:
    if s.distractor is None:
        return s
    d = np.clip(s.distractor + DISTRACTOR_STEP * rng.uniform(-1.0, 1.0, size=2), -1.0, 1.0)
    return EnvState(s.kind, s.agent, d)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _pixel_grid(cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    xs = np.linspace(-1.0, 1.0, cfg.width)
    ys = np.linspace(-1.0, 1.0, cfg.height)
    return np.meshgrid(xs, ys)  # each [H, W]; row index follows y, column follows x


def _blob(point, cfg: RenderConfig) -> np.ndarray:
    gx, gy = _pixel_grid(cfg)
    # radius is in pixels; convert to world units along each axis
    sx = cfg.blob_radius * 2.0 / (cfg.width - 1)
    sy = cfg.blob_radius * 2.0 / (cfg.height - 1)
    return np.exp(-0.5 * (((gx - point[0]) / sx) ** 2 + ((gy - point[1]) / sy) ** 2))


def _segment_distance(gx, gy, a, b) -> np.ndarray:
    ab = b - a
    t = ((gx - a[0]) * ab[0] + (gy - a[1]) * ab[1]) / max(float(ab @ ab), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    return np.hypot(gx - (a[0] + t * ab[0]), gy - (a[1] + t * ab[1]))


def render(s: EnvState, cfg: RenderConfig) -> np.ndarray:
    """[C, H, W] image in [0, 1]; identical states give identical images."""
    if s.kind == POINTMASS:
        img = _blob(s.agent, cfg)
    elif s.kind == REACHER:
        gx, gy = _pixel_grid(cfg)
        elbow = LINKS[0] * np.array([np.cos(s.agent[0]), np.sin(s.agent[0])])
        tip = reacher_end_effector(s)
        d = np.minimum(_segment_distance(gx, gy, np.zeros(2), elbow),
                       _segment_distance(gx, gy, elbow, tip))
        width = 0.5 * cfg.blob_radius * 2.0 / (min(cfg.height, cfg.width) - 1)
        img = np.exp(-0.5 * (d / width) ** 2)
    else:
        raise ValueError(f"unknown environment kind {s.kind!r}")
    if s.distractor is not None:
        img = np.maximum(img, cfg.distractor_intensity * _blob(s.distractor, cfg))
    return np.repeat(np.clip(img, 0.0, 1.0)[None], cfg.channels, axis=0)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    observations: np.ndarray  # float32 [L+1, C, H, W]
    actions: np.ndarray  # float32 [L, action_dim]
    states: np.ndarray  # float32 [L+1, state_dim]

    def __post_init__(self):
        n_obs, n_act = len(self.observations), len(self.actions)
        if n_obs != n_act + 1 or len(self.states) != n_obs:
            raise ValueError(f"episode has {n_obs} observations, {n_act} actions and "
                             f"{len(self.states)} states; need obs = states = actions + 1")

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass
class Dataset:
    kind: str
    obs_shape: tuple[int, int, int]
    action_dim: int
    state_dim: int
    episodes: list[Episode] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def distractor(self) -> bool:
        return self.state_dim == 4


def collect_random(kind: str, episodes: int, horizon: int, cfg: RenderConfig,
                   seed: int) -> Dataset:
    """Episodes of uniform random actions from uniform random initial states.

    Episode ``i`` draws from its own generator seeded by ``(seed, i)``, so the
    result does not depend on collection order.
    """
    if kind not in ENV_KINDS:
        raise ValueError(f"unknown environment kind {kind!r}")
    if episodes < 1 or horizon < 1:
        raise ValueError("episodes and horizon must both be >= 1")
    out = Dataset(kind, cfg.obs_shape, ACTION_DIM, 4 if cfg.distractor else 2)
    for i in range(episodes):
        rng = np.random.default_rng([seed, i])
        s = random_state(kind, rng, cfg.distractor)
        obs, acts, states = [render(s, cfg)], [], [s.vector()]
        for _ in range(horizon):
            a = rng.uniform(-1.0, 1.0, size=ACTION_DIM)
            s = move_distractor(step(s, a), rng)
            acts.append(a)
            obs.append(render(s, cfg))
            states.append(s.vector())
        out.episodes.append(Episode(np.asarray(obs, np.float32), np.asarray(acts, np.float32),
                                    np.asarray(states, np.float32)))
    return out


# ---------------------------------------------------------------------------
# DPND file format
# ---------------------------------------------------------------------------

MAGIC = b"DPND"
VERSION = 1
_HEADER = struct.Struct("<4sIBHHHHHI")


class DatasetFormatError(ValueError):
    """A DPND file could not be decoded."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


def dataset_nbytes(obs_shape, action_dim: int, state_dim: int, lengths) -> int:
    """Exact DPND file size for episodes of the given lengths."""
    pixels = int(np.prod(obs_shape))
    body = sum(4 + 4 * ((L + 1) * pixels + L * action_dim + (L + 1) * state_dim)
               for L in lengths)
    return _HEADER.size + body + 4


def encode_dataset(ds: Dataset) -> bytes:
    C, H, W = ds.obs_shape
    parts = [_HEADER.pack(MAGIC, VERSION, ENV_CODES[ds.kind], C, H, W, ds.action_dim,
                          ds.state_dim, len(ds.episodes))]
    for ep in ds.episodes:
        parts.append(struct.pack("<I", ep.length))
        for arr in (ep.observations, ep.actions, ep.states):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def decode_dataset(blob: bytes) -> Dataset:
    if len(blob) < 4:
        raise TruncatedFileError("file shorter than the magic number")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError("file shorter than the DPND header")
    _, version, code, C, H, W, adim, sdim, count = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatchError(f"DPND version {version}, this reader supports {VERSION}")
    kinds = {v: k for k, v in ENV_CODES.items()}
    if code not in kinds:
        raise DatasetFormatError(f"unknown environment code {code}")
    ds = Dataset(kinds[code], (C, H, W), adim, sdim)
    pos = _HEADER.size

    def take(n_floats: int, shape) -> np.ndarray:
        nonlocal pos
        end = pos + 4 * n_floats
        if end > len(blob) - 4:
            raise TruncatedFileError(f"episode data ends early at byte {len(blob)}")
        arr = np.frombuffer(blob, dtype="<f4", count=n_floats, offset=pos)
        pos = end
        return arr.astype(np.float32).reshape(shape)

    for _ in range(count):
        if pos + 4 > len(blob) - 4:
            raise TruncatedFileError("missing episode length")
        (L,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        obs = take((L + 1) * C * H * W, (L + 1, C, H, W))
        acts = take(L * adim, (L, adim))
        states = take((L + 1) * sdim, (L + 1, sdim))
        ds.episodes.append(Episode(obs, acts, states))
    if pos + 4 != len(blob):
        raise TruncatedFileError(f"expected {pos + 4} bytes, file has {len(blob)}")
    (crc,) = struct.unpack_from("<I", blob, pos)
    if crc != zlib.crc32(blob[:pos]):
        raise ChecksumError("CRC32 mismatch")
    return ds


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(ds: Dataset, path) -> int:
    """Write ``ds`` and return the CRC32 stored in the trailer."""
    blob = encode_dataset(ds)
    atomic_write(path, blob)
    return struct.unpack("<I", blob[-4:])[0]


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
