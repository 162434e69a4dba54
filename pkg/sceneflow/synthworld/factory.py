from typing import Dict, Type

from .primitives import Box, Plane, Primitive, Sphere


class PrimitiveFactory:
    """Factory class for creating ray-traceable primitives."""

    _primitives: Dict[str, Type[Primitive]] = {
        'plane': Plane,
        'sphere': Sphere,
        'box': Box,
    }

    @classmethod
    def create_primitive(cls, kind: str, **kwargs) -> Primitive:
        """Create a primitive of the given kind.

        Args:
            kind: Primitive kind ('plane', 'sphere', 'box')
            **kwargs: Geometry parameters of that kind

        Returns:
            Primitive instance

        Raises:
            ValueError: If the kind is not supported
        """
        primitive_class = cls._primitives.get(kind.lower())
        if not primitive_class:
            raise ValueError(f"Unsupported primitive: {kind}")

        return primitive_class(**kwargs)

    @classmethod
    def get_supported_primitives(cls) -> list:
        return list(cls._primitives.keys())

    @classmethod
    def get_parameters(cls, kind: str) -> list:
        """Get the geometry parameter names a primitive kind takes.

        Raises:
            ValueError: If the kind is not supported
        """
        primitive_class = cls._primitives.get(kind.lower())
        if not primitive_class:
            raise ValueError(f"Unsupported primitive: {kind}")

        return list(primitive_class.parameters)
