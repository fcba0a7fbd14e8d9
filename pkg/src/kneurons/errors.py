"""Exception hierarchy. Every error carries a short machine-readable ``category``."""


class KnowledgeNeuronsError(Exception):
    category = "error"


class LoadError(KnowledgeNeuronsError):
    category = "load"


class CapabilityError(KnowledgeNeuronsError):
    category = "capability"


class PromptStructureError(KnowledgeNeuronsError, ValueError):
    category = "prompt-structure"


class MultiTokenTargetError(KnowledgeNeuronsError, ValueError):
    category = "multi-token-target"


class LayerBoundsError(KnowledgeNeuronsError, IndexError):
    category = "bounds"


class ArgumentError(KnowledgeNeuronsError, ValueError):
    category = "argument"


class DegenerateMapError(KnowledgeNeuronsError, ValueError):
    category = "degenerate-map"


class CapacityError(KnowledgeNeuronsError):
    category = "capacity"


class ConstructionError(KnowledgeNeuronsError, ValueError):
    category = "construction"
