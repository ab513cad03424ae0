"""Ready-made brains."""
from akid.models import LeNet, OneLayerBrain, residual_unit

__all__ = ["LeNet", "OneLayerBrain", "residual_unit"]
