"""Seed derivation and Gaussian sampling.

Every random stream is a Philox4x64-10 counter-based generator (numpy's
``Philox`` bit generator). The 128-bit Philox key for a stream is the first
16 bytes of BLAKE2b(``"<master seed>/<component name>"``), so two components
that share a master seed still get independent streams and the mapping is
reproducible from any language with BLAKE2b and Philox.

Normals come from Box-Muller and shuffles from Fisher-Yates, both driven by
Philox doubles (``Generator.random``), so the exact sample sequence is
documented here rather than left to numpy's ziggurat / bounded-int internals.
"""

import hashlib

import numpy as np


def derive_key(seed, name):
    digest = hashlib.blake2b(f"{int(seed)}/{name}".encode(), digest_size=16).digest()
    return int.from_bytes(digest, "little")


def stream(seed, name):
    """Independent generator for component ``name`` under master ``seed``."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, name)))


def uniform(gen, size):
    return gen.random(size)


def normal(gen, size):
    """Standard normals by Box-Muller; consumes 2*ceil(n/2) uniforms."""
    n = int(np.prod(size))
    pairs = (n + 1) // 2
    u1 = 1.0 - gen.random(pairs)  # (0, 1], keeps log finite
    u2 = gen.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n].reshape(size)


def permutation(gen, n):
    """Fisher-Yates shuffle of range(n): swap i with floor(u * (i + 1))."""
    perm = list(range(n))
    if n < 2:
        return np.array(perm, dtype=np.int64)
    u = gen.random(n - 1)
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = int(u[step] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return np.array(perm, dtype=np.int64)
