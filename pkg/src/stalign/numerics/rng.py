"""Counter-based, splittable random streams.

Each :class:`Rng` wraps a Philox generator keyed by a hash of
``(seed, stream label)``.  Two streams with different labels are
statistically independent, and nothing touches numpy's global state.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np


def _derive_key(seed: int, stream: str) -> int:
    digest = hashlib.blake2b(f"{int(seed)}|{stream}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


class Rng:
    def __init__(self, seed: int, stream: str = "root"):
        self.seed = int(seed)
        self.stream = stream
        self.generator = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, stream)))

    def split(self, label: str) -> Rng:
        """Child stream; independent of this stream's consumption so far."""
        return Rng(self.seed, f"{self.stream}/{label}")

    # thin delegation to numpy.random.Generator
    def random(self, size=None, dtype=np.float64):
        return self.generator.random(size, dtype=dtype)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, x):
        return self.generator.permutation(x)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def get_state(self) -> dict:
        return {"seed": self.seed, "stream": self.stream,
                "bit_generator": self.generator.bit_generator.state}

    def set_state(self, state: dict) -> None:
        if state["seed"] != self.seed or state["stream"] != self.stream:
            raise ValueError(
                f"state belongs to stream {state['stream']!r}/{state['seed']}, "
                f"not {self.stream!r}/{self.seed}"
            )
        self.generator.bit_generator.state = state["bit_generator"]

    def state_bytes(self) -> bytes:
        return json.dumps(self.get_state(), sort_keys=True, default=_jsonable).encode()

    @classmethod
    def from_state_bytes(cls, raw: bytes) -> Rng:
        state = json.loads(raw.decode())
        rng = cls(state["seed"], state["stream"])
        bg = state["bit_generator"]
        for key in ("counter", "key", "buffer"):
            if key in bg.get("state", {}):
                bg["state"][key] = np.asarray(bg["state"][key], dtype=np.uint64)
        if "buffer" in bg:
            bg["buffer"] = np.asarray(bg["buffer"], dtype=np.uint64)
        rng.set_state(state)
        return rng


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
