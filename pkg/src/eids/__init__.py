"""Early intrusion detection from raw packets with a tiny Transformer.

Modules: :mod:`eids.flowcap` (captures to flow records), :mod:`eids.augment`
(subflows, augmentation, splits), :mod:`eids.tinyformer` (the classifier),
:mod:`eids.evalkit` (streaming evaluation), :mod:`eids.synthgen` (synthetic
flows) and :mod:`eids.cli`.
"""

__version__ = "0.1.0"
