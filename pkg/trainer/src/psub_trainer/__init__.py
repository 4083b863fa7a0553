"""Reference trainer for the phase-search engine's toy corpus.

Trains small sequential CNNs (stride-1 ops plus explicit subsampling) on
IDX datasets, exports them in the PSB1 container, and emits golden fixture
files pinning per-selection logits. This package shares no code with the
inference engine — only the byte formats — so fixture parity is a genuine
cross-implementation check.
"""

__version__ = "0.1.0"
