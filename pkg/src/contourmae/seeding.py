"""Named seed derivation.

All randomness in the pipeline flows from one root seed. Sub-streams
(data generation, mask sampling, weight init, batch shuffling, ...) get
independent seeds derived by hashing a name path with the root seed as
key, so changing one stage's stream never perturbs another's.
"""

import hashlib


def derive_seed(root: int, *names) -> int:
    """Derive a 64-bit seed for the sub-stream identified by ``names``.

    Deterministic across platforms and Python versions. ``names`` may mix
    strings and integers, e.g. ``derive_seed(0, "mask", epoch, image_idx)``.
    """
    if root < 0:
        raise ValueError("root seed must be non-negative")
    key = int(root).to_bytes(8, "little")
    payload = "/".join(str(n) for n in names).encode()
    digest = hashlib.blake2b(payload, digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")
