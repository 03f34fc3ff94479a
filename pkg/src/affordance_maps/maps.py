"""Built-in arenas for the five experiments.

The original layouts were only published as pictures, so these are
hand-made stand-ins with the same ingredients: circular obstacles that
block the diagonal between opposite corners, free corner regions for
starts and targets, and the per-experiment channel layouts.
"""
from __future__ import annotations

from .env_sim import Circle, EnvironmentSpec

APPROXIMATE = True

# a large disc in the centre and one smaller disc on each corner-to-corner
# diagonal; the gaps between them are only a little wider than the vehicle
DISC_LAYOUT = [
    (1.5, 1.0, 0.36),
    (0.765, 0.51, 0.225), (2.235, 0.51, 0.225), (0.765, 1.49, 0.225), (2.235, 1.49, 0.225),
]

TWO_LAYOUT = [(1.0, 0.75, 0.45), (2.0, 1.25, 0.45)]

TWELVE_LAYOUT = [
    (0.6, 0.55, 0.14), (1.2, 0.45, 0.15), (1.8, 0.6, 0.13), (2.4, 0.5, 0.15),
    (0.65, 1.05, 0.12), (1.25, 1.0, 0.16), (1.85, 1.1, 0.14), (2.45, 1.0, 0.12),
    (0.55, 1.5, 0.15), (1.15, 1.55, 0.13), (1.75, 1.6, 0.15), (2.4, 1.5, 0.14),
]

DECOY_LAYOUT = [(0.6, 0.75, 0.12), (2.4, 1.25, 0.12), (1.0, 1.6, 0.1), (2.0, 0.4, 0.1)]


def _circles(layout, channel):
    return [Circle(channel, (x, y), r) for x, y, r in layout]


def experiment_one():
    """One channel holding obstacles and borders."""
    return EnvironmentSpec(["obstacle"], _circles(DISC_LAYOUT, 0), border_channel=0, name="exp1-discs")


def experiment_two():
    """Zero-shot maps with 2 and 12 obstacles; same channel layout as Experiment I."""
    return {
        "two": EnvironmentSpec(["obstacle"], _circles(TWO_LAYOUT, 0), border_channel=0, name="exp2-two"),
        "twelve": EnvironmentSpec(["obstacle"], _circles(TWELVE_LAYOUT, 0), border_channel=0, name="exp2-twelve"),
    }


def experiment_three():
    """Borders and upper obstacles in channel 0, lower obstacles in 1, decoys in 2."""
    upper = [c for c in DISC_LAYOUT if c[1] >= 1.0]
    lower = [c for c in DISC_LAYOUT if c[1] < 1.0]
    shapes = _circles(upper, 0) + _circles(lower, 1) + _circles(DECOY_LAYOUT, 2)
    return EnvironmentSpec(["obstacle", "obstacle", "decoy"], shapes, border_channel=0, name="exp3-hard")


def experiment_four(fog_std=1.0):
    """Fog terrains in channel 0, borders in channel 1."""
    return EnvironmentSpec(["fog", "border"], _circles(DISC_LAYOUT, 0), border_channel=1,
                           fog_std=fog_std, name="exp4-fog")


EXP5_CHANNELS = ("obstacle", "fog", "force_up", "force_down")


def experiment_five_training():
    """Four training arenas: the same layout as obstacles, fog, up- and down-fields."""
    return [
        EnvironmentSpec(EXP5_CHANNELS, _circles(DISC_LAYOUT, k), border_channel=0, name=f"exp5-{tag}")
        for k, tag in enumerate(EXP5_CHANNELS)
    ]


def experiment_five_showcase():
    """All four properties at once: obstacle upper left, fog upper right,
    down-field lower left, up-field lower right."""
    shapes = [
        Circle(0, (0.9, 1.35), 0.35),
        Circle(1, (2.1, 1.35), 0.35),
        Circle(3, (0.9, 0.65), 0.35),
        Circle(2, (2.1, 0.65), 0.35),
    ]
    return EnvironmentSpec(EXP5_CHANNELS, shapes, border_channel=0, name="exp5-showcase")


def builtin(name):
    table = {
        "exp1": experiment_one,
        "exp2-two": lambda: experiment_two()["two"],
        "exp2-twelve": lambda: experiment_two()["twelve"],
        "exp3": experiment_three,
        "exp4": experiment_four,
        "exp5-showcase": experiment_five_showcase,
    }
    if name not in table:
        raise KeyError(f"unknown built-in map {name!r}")
    return table[name]()
