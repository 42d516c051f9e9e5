"""divlab: a desk-scale lab for fine-grained semantic divergences in NMT.

Subpackages:
  corpus    parsing, filtering, mixing, sentence tags
  bpe       subword segmentation and factor projection
  synthdiv  synthetic divergence generation and statistics
  model     factored transformer, divergent-aware loss, gradient checks
  training  Adam training loop with patience schedule
  decoding  beam search with greedy factor prefixes, forced decoding
  metrics   degeneration, TER, token accuracy, InfECE, BLEU
  demo      deterministic toy translation task used in tests and examples
"""

__version__ = "0.1.0"
