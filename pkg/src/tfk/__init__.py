"""Multi-modal fusion transformer for skin-lesion checklist classification, built on a numpy autodiff core."""

__version__ = "0.1.0"
