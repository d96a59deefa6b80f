"""Nonword pronunciation classification for children's speech.

Audio preprocessing, mel / VTLN features, a small numpy CNN with
word-independent training and word-dependent fine-tuning, and a
per-nonword evaluation harness.
"""

__version__ = "0.1.0"

CANONICAL_RATE = 16000
NONWORDS = {
    1: "Maluk",
    2: "Bilop",
    3: "Ronterklabe",
    4: "Glösterkeit",
    5: "Seregropist",
    6: "Pristobierichkeit",
    7: "Kabusaniker",
}
