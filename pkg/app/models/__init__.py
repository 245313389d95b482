from .common import * 