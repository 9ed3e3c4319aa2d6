"""Small scenes and configs shared by the test modules."""

from django_inverse_rt.conf import DATA_DIR
from django_inverse_rt.forward_rt import RtConfig
from django_inverse_rt.geometry import CANONICAL_ROOM, make_scene

CANONICAL_JSON = DATA_DIR / "canonical_scene.json"
CANONICAL_XML = DATA_DIR / "canonical_scene.xml"
PROMPT1_EXAMPLE = DATA_DIR / "prompt1_example_response.json"
PROMPT2_EXAMPLE = DATA_DIR / "prompt2_example_response.json"

FAST_RT = RtConfig(u_ray=1000, depth=2)


def floor_only_scene(material="Brick"):
    """The canonical room with only its floor; slot 0 is the floor."""
    floor = {
        "name": "Floor",
        "kind": "floor",
        "material": material,
        "center": (0.0, 0.0, 0.0),
        "size": (10.0, 10.0, 0.0),
    }
    return make_scene([floor], *CANONICAL_ROOM, name="floor_only")


def empty_room():
    return make_scene([], *CANONICAL_ROOM, name="empty")


def floor_and_wall_scene():
    """Floor (slot 0) plus the x = -5 wall (slot 1)."""
    specs = [
        {"name": "Floor", "kind": "floor", "material": "Brick", "center": (0, 0, 0), "size": (10, 10, 0)},
        {"name": "Wall1", "kind": "wall", "material": "Concrete", "center": (-5, 0, 1.5), "size": (0, 10, 3)},
    ]
    return make_scene(specs, *CANONICAL_ROOM, name="floor_wall")
