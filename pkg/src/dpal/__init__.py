"""Pattern-alignment distillation pretraining on a numpy autodiff core."""

__version__ = "0.1.0"
