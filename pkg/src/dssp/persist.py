"""Bit-exact binary persistence for demonstration datasets and checkpoints.

Wire formats (all integers unsigned 32-bit little-endian, floats 32-bit
little-endian):

dataset:     magic "DSSPDEMO" | version | env name (len-prefixed UTF-8) |
             scene_dim | proprio_dim | action_dim | trajectory count |
             per trajectory: T | observations (T+1 rows) | actions (T rows) |
             success byte
checkpoint:  magic "DSSPCKPT" | version | config digest (len-prefixed hex) |
             config text (len-prefixed UTF-8) | parameter count |
             per parameter: name | ndim | dims | float32 data

The checkpoint embeds the full config text so evaluation can rebuild the
exact architecture from the file alone; the stored digest must match a
recomputation from the embedded text unless the caller forces the load.
Loaders validate magic, version, and sizes, and report the byte offset of
any corruption.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig, config_digest, format_config, parse_config_text
from .envs import Trajectory, descriptor_for
from .numcore import DsspError, ParamStore

DATASET_MAGIC = b"DSSPDEMO"
CHECKPOINT_MAGIC = b"DSSPCKPT"
FORMAT_VERSION = 1


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.off = 0
        self.path = path

    def fail(self, why: str):
        raise DsspError(f"{self.path}: {why} at byte offset {self.off}")

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            self.fail(f"truncated (wanted {n} bytes, have {len(self.data) - self.off})")
        out = self.data[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.raw(4))[0]

    def u8(self) -> int:
        return self.raw(1)[0]

    def string(self) -> str:
        n = self.u32()
        return self.raw(n).decode("utf-8")

    def f32_array(self, shape: tuple) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        buf = self.raw(4 * count)
        return np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    def done(self) -> None:
        if self.off != len(self.data):
            self.fail(f"{len(self.data) - self.off} trailing bytes")


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def _string(s: str) -> bytes:
    b = s.encode("utf-8")
    return _u32(len(b)) + b


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


# -- datasets -----------------------------------------------------------------------

@dataclass
class Dataset:
    env_name: str
    scene_dim: int
    proprio_dim: int
    action_dim: int
    trajectories: list


def save_dataset(path: str, trajectories: list) -> None:
    if not trajectories:
        raise DsspError("refusing to save an empty dataset")
    env_name = trajectories[0].env_name
    desc = descriptor_for(env_name)
    out = [DATASET_MAGIC, _u32(FORMAT_VERSION), _string(env_name),
           _u32(desc.scene_dim), _u32(desc.proprio_dim), _u32(desc.action_dim),
           _u32(len(trajectories))]
    for tr in trajectories:
        if tr.env_name != env_name:
            raise DsspError("dataset mixes environments")
        T = tr.actions.shape[0]
        if tr.observations.shape != (T + 1, desc.obs_dim):
            raise DsspError(f"trajectory has observations {tr.observations.shape}, "
                            f"expected ({T + 1}, {desc.obs_dim})")
        out.append(_u32(T))
        out.append(_f32(tr.observations))
        out.append(_f32(tr.actions))
        out.append(bytes([1 if tr.success else 0]))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.raw(8) != DATASET_MAGIC:
        r.off = 0
        r.fail("bad magic (not a dataset file)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DsspError(f"{path}: unsupported dataset version {version}")
    env_name = r.string()
    scene_dim, proprio_dim, action_dim = r.u32(), r.u32(), r.u32()
    count = r.u32()
    obs_dim = scene_dim + proprio_dim
    trajectories = []
    for i in range(count):
        T = r.u32()
        observations = r.f32_array((T + 1, obs_dim)).astype(np.float64)
        actions = r.f32_array((T, action_dim)).astype(np.float64)
        success = bool(r.u8())
        trajectories.append(Trajectory(observations=observations, actions=actions,
                                       success=success, env_name=env_name, seed=-1))
    r.done()
    return Dataset(env_name=env_name, scene_dim=scene_dim, proprio_dim=proprio_dim,
                   action_dim=action_dim, trajectories=trajectories)


# -- checkpoints --------------------------------------------------------------------

def save_checkpoint(path: str, params: ParamStore, cfg: TrainConfig) -> None:
    text = format_config(cfg)
    out = [CHECKPOINT_MAGIC, _u32(FORMAT_VERSION), _string(config_digest(cfg)),
           _string(text), _u32(len(params))]
    for name, t in params.items():
        out.append(_string(name))
        out.append(_u32(t.data.ndim))
        for dim in t.data.shape:
            out.append(_u32(dim))
        out.append(_f32(t.data))
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path: str, force: bool = False) -> tuple[ParamStore, TrainConfig]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read(), path)
    if r.raw(8) != CHECKPOINT_MAGIC:
        r.off = 0
        r.fail("bad magic (not a checkpoint file)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise DsspError(f"{path}: unsupported checkpoint version {version}")
    digest = r.string()
    text = r.string()
    cfg = parse_config_text(text)
    if config_digest(cfg) != digest and not force:
        raise DsspError(f"{path}: config digest mismatch (stored {digest[:12]}..., "
                        f"recomputed {config_digest(cfg)[:12]}...); pass force to override")
    count = r.u32()
    store = ParamStore()
    for _ in range(count):
        name = r.string()
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        data = r.f32_array(shape).astype(np.float64)
        store.add(name, Tensor(data, requires_grad=True))
    r.done()
    return store, cfg
