"""Multi-task LSTM language modeling engine for code-switched text.

A word-level LSTM language model whose input concatenates word and
bilingual-POS embeddings, joined to a POS-sequence LSTM whose hidden state
is summed into the word prediction; trained on the convex combination of
both cross-entropies. Includes a from-scratch reverse-mode autodiff core,
numba-accelerated kernels with a pure-numpy fallback, a synthetic
code-switched corpus generator, and switch-point diagnostics.
"""

__version__ = "0.1.0"
