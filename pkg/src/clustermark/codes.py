"""Secret keys and keyed pseudorandom derivation of per-context watermark codes.

All pseudorandomness flows through a keyed BLAKE2b of the context n-gram, so
that the embedder and the detector reproduce exactly the same code from the
same key and context, while anybody without the key sees uniform noise.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass
from typing import Sequence

__all__ = [
    "SecretKey",
    "WatermarkCode",
    "derive_code",
    "derive_unit_uniform",
    "derive_stream_seed",
    "KEY_ENV_VAR",
]

KEY_ENV_VAR = "CLUSTERMARK_KEY"

_CODE_PERSON = b"cm:code:v1"
_UNIT_PERSON = b"cm:unit:v1"
_SEED_PERSON = b"cm:seed:v1"


class SecretKey:
    """Watermarking key material (>= 16 bytes).

    Deliberately opaque: the repr never shows the bytes and nothing in this
    package writes key material into reports or logs.  Use :meth:`to_hex`
    for explicit export (e.g. the keygen command).
    """

    MIN_BYTES = 16

    __slots__ = ("_material",)

    def __init__(self, material: bytes) -> None:
        material = bytes(material)
        if len(material) < self.MIN_BYTES:
            raise ValueError(
                f"secret key must be at least {self.MIN_BYTES} bytes, got {len(material)}"
            )
        self._material = material

    @property
    def material(self) -> bytes:
        return self._material

    @classmethod
    def generate(cls, nbytes: int = 32) -> "SecretKey":
        if nbytes < cls.MIN_BYTES:
            raise ValueError(f"key length must be >= {cls.MIN_BYTES} bytes")
        return cls(os.urandom(nbytes))

    @classmethod
    def from_hex(cls, text: str) -> "SecretKey":
        return cls(bytes.fromhex(text.strip()))

    @classmethod
    def from_file(cls, path) -> "SecretKey":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_hex(fh.read())

    @classmethod
    def from_env(cls, name: str = KEY_ENV_VAR) -> "SecretKey":
        value = os.environ.get(name)
        if not value:
            raise KeyError(f"environment variable {name} is not set")
        return cls.from_hex(value)

    def to_hex(self) -> str:
        return self._material.hex()

    def __repr__(self) -> str:
        return f"SecretKey(<{len(self._material)} bytes>)"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SecretKey):
            return NotImplemented
        return hmac.compare_digest(self._material, other._material)

    def __hash__(self) -> int:
        return hash(self._material)


@dataclass(frozen=True)
class WatermarkCode:
    """Pseudorandom code for one generation step.

    `code_id` is a 128-bit identity used for history deduplication;
    `cluster_index` is the prescribed target cluster in [0, h).  Both are
    pure functions of (key, context n-gram); `code_id` does not depend on h.
    """

    code_id: int
    cluster_index: int


def _digest(key: SecretKey, context: Sequence[int], person: bytes, extra: bytes = b"") -> bytes:
    mac = hashlib.blake2b(key=key.material, digest_size=32, person=person)
    if extra:
        mac.update(extra)
    for tok in context:
        t = int(tok)
        if t < 0:
            raise ValueError(f"context token ids must be non-negative, got {t}")
        mac.update(t.to_bytes(8, "little"))
    return mac.digest()


def derive_code(key: SecretKey, context: Sequence[int], h: int) -> WatermarkCode:
    """Derive the watermark code for a context n-gram.

    The cluster index is mapped to [0, h) by rejection so it is exactly
    uniform (no modulo bias); the digest is extended by re-hashing on the
    astronomically rare rejection of every 64-bit chunk.
    """
    if not isinstance(key, SecretKey):
        raise TypeError("key must be a SecretKey")
    h = int(h)
    if h < 1:
        raise ValueError(f"cluster count must be >= 1, got {h}")
    context = tuple(context)
    if not context:
        raise ValueError("context must contain at least one token id")
    digest = _digest(key, context, _CODE_PERSON)
    code_id = int.from_bytes(digest[:16], "little")
    if h == 1:
        return WatermarkCode(code_id=code_id, cluster_index=0)
    limit = (1 << 64) - ((1 << 64) % h)
    offset = 16
    while True:
        while offset + 8 <= len(digest):
            chunk = int.from_bytes(digest[offset : offset + 8], "little")
            offset += 8
            if chunk < limit:
                return WatermarkCode(code_id=code_id, cluster_index=chunk % h)
        mac = hashlib.blake2b(digest, key=key.material, digest_size=32, person=_CODE_PERSON)
        digest = mac.digest()
        offset = 0


def derive_unit_uniform(key: SecretKey, context: Sequence[int]) -> float:
    """Deterministic uniform draw in [0, 1) keyed on (key, context).

    Used by the reproducible-trace mode where the acceptance variable is a
    function of the watermark code instead of fresh randomness.
    """
    digest = _digest(key, tuple(context), _UNIT_PERSON)
    bits = int.from_bytes(digest[:8], "little") >> 11
    return bits * 2.0**-53


def derive_stream_seed(key: SecretKey, context: Sequence[int], label: bytes) -> int:
    """64-bit RNG seed keyed on (key, context, label).

    Baseline schemes use this to derive their per-context token orderings and
    green sets from the same secret key machinery.
    """
    if not label:
        raise ValueError("label must be non-empty")
    extra = len(label).to_bytes(4, "little") + bytes(label)
    digest = _digest(key, tuple(context), _SEED_PERSON, extra=extra)
    return int.from_bytes(digest[:8], "little")
