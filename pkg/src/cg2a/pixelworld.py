"""ColorReach: a deterministic pixel-observation grid task.

An agent square must reach a goal square on an 8x8 grid.  Rewards are a
-0.01 step cost plus +1 on reaching the goal; episodes end on the goal
or after 100 steps.  Observations are K=3 stacked RGB frames rendered
from the grid, values in [0, 1].

Variants share the identical underlying state dynamics and differ only
in how the background is rendered, which is what makes zero-shot
evaluation across variants meaningful:

* TRAIN: fixed mid-gray background
* RANDOM_COLORS: per-episode background color
* TEXTURE_BACKGROUND: per-episode static checkerboard
* DYNAMIC_BACKGROUND: stripe pattern whose phase advances every step

Everything is a pure function of (seed, variant, action sequence).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ProtocolError, StructuralError

GRID = 8
HORIZON = 100
FRAME_STACK = 3
STEP_COST = 0.01
GOAL_REWARD = 1.0
DEFAULT_RENDER_SIZE = 24

AGENT_COLOR = np.array([230, 50, 50], dtype=np.uint8)
GOAL_COLOR = np.array([50, 210, 70], dtype=np.uint8)
TRAIN_BG = np.array([128, 128, 128], dtype=np.uint8)


class Action(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


_MOVES = {
    Action.UP: (-1, 0),
    Action.DOWN: (1, 0),
    Action.LEFT: (0, -1),
    Action.RIGHT: (0, 1),
}


class EnvVariant(enum.Enum):
    TRAIN = "train"
    RANDOM_COLORS = "random_colors"
    TEXTURE_BACKGROUND = "texture_background"
    DYNAMIC_BACKGROUND = "dynamic_background"

    @classmethod
    def parse(cls, name: str) -> "EnvVariant":
        for variant in cls:
            if variant.value == name:
                return variant
        raise StructuralError(f"unknown environment variant {name!r}")


@dataclass(frozen=True)
class Background:
    """Per-episode rendering parameters, realized at reset."""

    color_a: tuple[int, int, int]
    color_b: tuple[int, int, int]
    cell: int


@dataclass(frozen=True)
class EnvState:
    agent: tuple[int, int]
    goal: tuple[int, int]
    steps: int
    variant: EnvVariant
    episode_seed: int
    done: bool
    background: Background
    frames: tuple[np.ndarray, ...]
    render_size: int


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


def _render_background(variant, background, phase, size):
    frame = np.empty((3, size, size), dtype=np.uint8)
    if variant is EnvVariant.TRAIN:
        frame[:] = TRAIN_BG[:, None, None]
    elif variant is EnvVariant.RANDOM_COLORS:
        frame[:] = np.array(background.color_a, dtype=np.uint8)[:, None, None]
    elif variant is EnvVariant.TEXTURE_BACKGROUND:
        cell = background.cell
        pattern = (np.add.outer(np.arange(size) // cell, np.arange(size) // cell) % 2).astype(bool)
        a = np.array(background.color_a, dtype=np.uint8)
        b = np.array(background.color_b, dtype=np.uint8)
        frame[:] = np.where(pattern[None], b[:, None, None], a[:, None, None])
    else:  # DYNAMIC_BACKGROUND: stripes sliding one pixel per step
        base = np.array(background.color_a, dtype=np.int16)
        xs = np.arange(size)
        for ch in range(3):
            wave = 70.0 * np.sin(2.0 * np.pi * (xs + 2 * phase) / 12.0 + ch * 2.0)
            row = np.clip(base[ch] + np.round(wave), 0, 255).astype(np.uint8)
            frame[ch] = row[None, :]
    return frame


def _render_frame(state: EnvState, phase: int) -> np.ndarray:
    size = state.render_size
    cell = size // GRID
    frame = _render_background(state.variant, state.background, phase, size)

    def draw(pos, color):
        r0, c0 = pos[0] * cell, pos[1] * cell
        frame[:, r0 : r0 + cell, c0 : c0 + cell] = color[:, None, None]

    draw(state.goal, GOAL_COLOR)
    draw(state.agent, AGENT_COLOR)
    return frame


def observation(state: EnvState) -> np.ndarray:
    """Stacked frames as float32 in [0, 1], oldest first."""
    return (np.concatenate(state.frames, axis=0).astype(np.float32)) / 255.0


def reset(seed: int, variant: EnvVariant, render_size: int = DEFAULT_RENDER_SIZE):
    """Start an episode; returns (state, initial observation).

    The agent/goal layout is drawn from a sub-stream that does not
    depend on the variant, so the underlying trajectory of any action
    sequence is identical across variants.
    """
    if render_size % GRID != 0:
        raise StructuralError(f"render size must be a multiple of {GRID}")
    layout_ss, bg_ss = np.random.SeedSequence(seed).spawn(2)
    layout_rng = np.random.default_rng(layout_ss)
    agent_cell = int(layout_rng.integers(0, GRID * GRID))
    goal_cell = int(layout_rng.integers(0, GRID * GRID - 1))
    if goal_cell >= agent_cell:
        goal_cell += 1
    bg_rng = np.random.default_rng(bg_ss)
    color_a = tuple(int(v) for v in bg_rng.integers(38, 218, size=3))
    color_b = tuple(int(v) for v in bg_rng.integers(38, 218, size=3))
    cell = int(bg_rng.integers(2, 5))
    state = EnvState(
        agent=(agent_cell // GRID, agent_cell % GRID),
        goal=(goal_cell // GRID, goal_cell % GRID),
        steps=0,
        variant=variant,
        episode_seed=seed,
        done=False,
        background=Background(color_a, color_b, cell),
        frames=(),
        render_size=render_size,
    )
    first = _render_frame(state, phase=0)
    state = replace(state, frames=(first,) * FRAME_STACK)
    return state, observation(state)


def step(state: EnvState, action: int):
    """Advance one step; returns (new state, StepResult)."""
    if state.done:
        raise ProtocolError("step() called on a finished episode")
    dr, dc = _MOVES[Action(action)]
    r = min(max(state.agent[0] + dr, 0), GRID - 1)
    c = min(max(state.agent[1] + dc, 0), GRID - 1)
    steps = state.steps + 1
    reached = (r, c) == state.goal
    reward = (GOAL_REWARD if reached else 0.0) - STEP_COST
    done = reached or steps >= HORIZON
    state = replace(state, agent=(r, c), steps=steps, done=done)
    frame = _render_frame(state, phase=steps)
    state = replace(state, frames=state.frames[1:] + (frame,))
    return state, StepResult(observation=observation(state), reward=reward, done=done)


def manhattan_distance(state: EnvState) -> int:
    return abs(state.agent[0] - state.goal[0]) + abs(state.agent[1] - state.goal[1])


def shortest_path_action(state: EnvState) -> Action:
    """Greedy Manhattan move toward the goal (rows first)."""
    dr = state.goal[0] - state.agent[0]
    dc = state.goal[1] - state.agent[1]
    if dr < 0:
        return Action.UP
    if dr > 0:
        return Action.DOWN
    if dc < 0:
        return Action.LEFT
    return Action.RIGHT


def write_ppm(path, frame: np.ndarray):
    """Dump one uint8 (3, H, W) frame as a binary PPM for inspection."""
    if frame.ndim != 3 or frame.shape[0] != 3 or frame.dtype != np.uint8:
        raise StructuralError("expected a uint8 (3, H, W) frame")
    h, w = frame.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode())
        fh.write(np.ascontiguousarray(frame.transpose(1, 2, 0)).tobytes())
