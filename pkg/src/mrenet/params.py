"""Named parameter store, Adam optimizer state, and binary checkpoints.

Every learnable tensor in a model lives in a :class:`ParamStore` under a
unique dotted name, alongside its Adam moment buffers.  Non-trainable state
(batch-norm running statistics) is stored too so a checkpoint captures the
complete model.

Checkpoint format (all little-endian):
  magic ``MRECKPT1``
  u32 entry count N; then N x (u32 name length, UTF-8 name, u32 rank,
  u32 dims[rank], f64 data)
  the same layout again for the Adam moment buffers (2N entries, named
  ``<param>.adam_m`` / ``<param>.adam_v``)
  u64 optimizer step counter

Data is always serialized as f64 regardless of the in-memory dtype, so
float32 models round-trip bit-exactly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from mrenet.binio import FormatError, Reader, Writer
from mrenet.tensor import ConfigError, Tensor

CHECKPOINT_MAGIC = b"MRECKPT1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Ordered mapping of name -> parameter Tensor plus optimizer state."""

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.array(data), requires_grad=trainable)
        self._entries[name] = t
        self._trainable[name] = trainable
        self._adam_m[name] = np.zeros_like(t.data)
        self._adam_v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._entries.items() if self._trainable[n]]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def n_parameters(self, trainable_only: bool = True) -> int:
        return sum(t.size for n, t in self._entries.items()
                   if self._trainable[n] or not trainable_only)

    def zero_grads(self):
        for name, t in self._entries.items():
            if self._trainable[name]:
                t.zero_grad()

    # -- optimization -----------------------------------------------------

    def adam_step(self, eta: float):
        """One Adam update over all trainable entries.

        Validates every gradient first so a non-finite gradient aborts the
        whole step without partially updating the model.
        """
        for name, t in self.trainable_items():
            g = t.grad
            if g is None:
                raise ConfigError(
                    f"adam_step before backward: parameter {name!r} has no gradient")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(
                    f"non-finite gradient for parameter {name!r}; step aborted")
        self.step += 1
        t_step = self.step
        bc1 = 1.0 - ADAM_BETA1 ** t_step
        bc2 = 1.0 - ADAM_BETA2 ** t_step
        for name, p in self.trainable_items():
            g = p.grad
            m = self._adam_m[name]
            v = self._adam_v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            p.data -= eta * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)

    # -- persistence --------------------------------------------------------

    def save(self, path):
        w = Writer()
        w.raw(CHECKPOINT_MAGIC)
        _write_entries(w, [(n, t.data) for n, t in self._entries.items()])
        moments = []
        for n in self._entries:
            moments.append((n + ".adam_m", self._adam_m[n]))
            moments.append((n + ".adam_v", self._adam_v[n]))
        _write_entries(w, moments)
        w.u64(self.step)
        Path(path).write_bytes(w.getvalue())

    def load_state(self, path):
        """Fill this store's entries (and moments) from a checkpoint.

        The checkpoint must contain exactly this store's parameter names with
        matching shapes; dtypes are preserved from the in-memory tensors.
        """
        arrays, moments, step = read_checkpoint(path)
        mine = set(self._entries)
        theirs = set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise FormatError(
                f"checkpoint does not match model: missing {missing}, unexpected {extra}")
        for name, t in self._entries.items():
            arr = arrays[name]
            if arr.shape != t.data.shape:
                raise FormatError(
                    f"checkpoint shape mismatch for {name!r}: "
                    f"file has {arr.shape}, model has {t.data.shape}")
            t.data = arr.astype(t.data.dtype)
            self._adam_m[name] = moments[name + ".adam_m"].astype(t.data.dtype)
            self._adam_v[name] = moments[name + ".adam_v"].astype(t.data.dtype)
        self.step = step


def _write_entries(w: Writer, entries):
    w.u32(len(entries))
    for name, arr in entries:
        nb = name.encode("utf-8")
        w.u32(len(nb))
        w.raw(nb)
        w.u32(arr.ndim)
        for d in arr.shape:
            w.u32(d)
        w.array(arr, "<f8")


def _read_entries(r: Reader) -> dict[str, np.ndarray]:
    count = r.u32()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = [r.u32() for _ in range(rank)]
        n = int(np.prod(dims)) if dims else 1
        data = r.array("<f8", n).reshape(dims)
        if name in out:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        out[name] = data
    return out


def read_checkpoint(path):
    """Parse a checkpoint file -> (arrays, moment arrays, step counter)."""
    r = Reader(Path(path).read_bytes(), label=str(path))
    r.expect_magic(CHECKPOINT_MAGIC)
    arrays = _read_entries(r)
    moments = _read_entries(r)
    step = r.u64()
    r.done()
    expected = set()
    for n in arrays:
        expected.add(n + ".adam_m")
        expected.add(n + ".adam_v")
    if set(moments) != expected:
        raise FormatError("checkpoint moment entries do not match parameters")
    return arrays, moments, step


def backward_pass(loss: Tensor, store: ParamStore):
    """Run backward from a scalar loss, leaving every trainable entry with a
    populated gradient (zero for parameters the graph never touched)."""
    store.zero_grads()
    loss.backward()
