from .activation import GELU
from .activation import Sigmoid
from .activation import gelu
from .attention import Attention
from .conv import AvgPool2
from .conv import Conv2d
from .conv import Upsample2
from .dense import Dense
from .embedding import grid_embed
from .embedding import sinusoidal_embed
from .gradcheck import check_layer
from .gradcheck import gradcheck
from .layer import Layer
from .layer import build_layer
from .layer import layer_registry
from .norm import GroupNorm
from .optim import adamw_step
from .optim import cosine_lr
from .params import ParamStore
from .params import accumulate
from .sequential import Residual
from .sequential import Sequential
from .sequential import backward
from .sequential import forward
