from .primitives import Primitive, RigidMotion, SceneError
from .factory import PrimitiveFactory
from .scene import ObjectSpec, SceneSpec, random_scene
from .render import render

__all__ = [
    'ObjectSpec',
    'Primitive',
    'PrimitiveFactory',
    'RigidMotion',
    'SceneError',
    'SceneSpec',
    'random_scene',
    'render',
]
