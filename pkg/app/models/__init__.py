from .unet import ConditionalUNet  # noqa
from .condition import ConditionEmbedder  # noqa
from .fusion import FusionBlock  # noqa
from .seg_head import SegmentationHead  # noqa
from .encoder import PlainEncoder  # noqa
