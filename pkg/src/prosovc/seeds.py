"""Deterministic seed derivation.

All randomness in a run derives from one root seed via named substreams,
so individual components (corpus, init, dropout, sampling, batching) can
be re-seeded independently and any step is a pure function of
(config, seed, step).
"""

import hashlib


def seed_for(root: int, *names) -> int:
    """Derive a substream seed from a root seed and a name path.

    Names may be strings or integers (e.g. a step counter). The result is
    a stable non-negative 63-bit integer, valid for both
    ``numpy.random.default_rng`` and ``torch.Generator.manual_seed``.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(root)).encode("ascii"))
    for name in names:
        h.update(b"/")
        h.update(str(name).encode("utf-8"))
    return int.from_bytes(h.digest(), "little") & 0x7FFFFFFFFFFFFFFF
