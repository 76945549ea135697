"""Desk-scale workbench for scholarly-abstract language modeling.

Pipeline: clean a corpus of abstracts, continue masked-LM pre-training
of a small bidirectional encoder, score it by pseudo-perplexity, then
fine-tune and evaluate discipline classification, abstract
structure-function identification, and software-entity recognition.
"""

__version__ = "0.1.0"
