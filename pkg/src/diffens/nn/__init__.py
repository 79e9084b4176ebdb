from . import engine
from .optim import Adam
from .params import ParamStore
from .unet import NetSpec, UNet, load_checkpoint, save_checkpoint, time_embedding

__all__ = [
    "engine",
    "Adam",
    "ParamStore",
    "NetSpec",
    "UNet",
    "time_embedding",
    "save_checkpoint",
    "load_checkpoint",
]
