"""Colored-keys gridworld POMDP.

A DoorKey-style grid (default 5x5 with border walls): a vertical wall with
one locked door splits the world, the key and the agent start on the left,
the goal sits at the bottom-right interior cell. The key and the door share
the domain color — domains differ only in that color, so dynamics and
rewards are color-invariant. Reaching the goal at step t pays the sparse
reward 1 - 0.9 t / T with horizon T = 250; everything else pays 0.

Observations are egocentric 5x5x3 integer tensors (object type, color,
state channels) with the agent at the bottom-center facing up; cells behind
walls or non-open doors are marked unseen, cells outside the grid read as
walls, and a carried key does not appear in the grid channels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .seeding import make_rng

# object-type codes (3, 6, 7 reserved)
TYPE_UNSEEN = 0
TYPE_EMPTY = 1
TYPE_WALL = 2
TYPE_DOOR = 4
TYPE_KEY = 5
TYPE_GOAL = 8

# color codes
COLOR_RED = 0
COLOR_GREEN = 1
COLOR_BLUE = 2
COLOR_PURPLE = 3
COLOR_YELLOW = 4
COLOR_GREY = 5

COLOR_NAMES = {"red": 0, "green": 1, "blue": 2, "purple": 3, "yellow": 4, "grey": 5}

# door-state codes (0 for everything that is not a door)
STATE_OPEN = 0
STATE_CLOSED = 1
STATE_LOCKED = 2

WALL_COLOR = COLOR_GREY
GOAL_COLOR = COLOR_GREEN

VIEW = 5          # egocentric window is VIEW x VIEW
DEFAULT_HORIZON = 250


class Action(IntEnum):
    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    PICKUP = 3
    DROP = 4
    TOGGLE = 5
    DONE = 6


# headings: east, south, west, north
DIR_VECTORS = ((1, 0), (0, 1), (-1, 0), (0, -1))


@dataclass
class GridEnv:
    width: int
    height: int
    types: np.ndarray    # (width, height) int8, indexed [x, y]
    colors: np.ndarray
    states: np.ndarray
    agent_pos: tuple
    agent_dir: int
    domain_color: int
    horizon: int = DEFAULT_HORIZON
    carrying: tuple | None = None   # (type, color) of the held object
    t: int = 0
    done: bool = False
    layout_seed: int = 0


def generate_env(
    domain_color: int,
    seed: int,
    width: int = 5,
    height: int = 5,
    horizon: int = DEFAULT_HORIZON,
) -> GridEnv:
    """Sample a DoorKey layout, deterministic per (color, seed).

    The color only affects the key/door color fields, never the geometry,
    so the same seed yields identical layouts across domains.
    """
    if domain_color not in range(6):
        raise ValueError(f"invalid color code {domain_color}")
    if width < 5 or height < 4:
        raise ValueError("grid too small for a DoorKey layout")
    rng = make_rng(seed)

    types = np.full((width, height), TYPE_EMPTY, dtype=np.int8)
    colors = np.zeros((width, height), dtype=np.int8)
    states = np.zeros((width, height), dtype=np.int8)
    border = np.zeros((width, height), dtype=bool)
    border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
    types[border] = TYPE_WALL
    colors[border] = WALL_COLOR

    split = int(rng.integers(2, width - 2))
    types[split, :] = TYPE_WALL
    colors[split, :] = WALL_COLOR
    door_y = int(rng.integers(1, height - 1))
    types[split, door_y] = TYPE_DOOR
    colors[split, door_y] = domain_color
    states[split, door_y] = STATE_LOCKED

    types[width - 2, height - 2] = TYPE_GOAL
    colors[width - 2, height - 2] = GOAL_COLOR

    key = (int(rng.integers(1, split)), int(rng.integers(1, height - 1)))
    types[key] = TYPE_KEY
    colors[key] = domain_color

    while True:
        agent = (int(rng.integers(1, split)), int(rng.integers(1, height - 1)))
        if agent != key:
            break
    agent_dir = int(rng.integers(0, 4))

    return GridEnv(width, height, types, colors, states, agent, agent_dir,
                   domain_color, horizon, layout_seed=int(seed))


def step(env: GridEnv, action) -> tuple[np.ndarray, float, bool]:
    """Advance one step; returns (observation, reward, done).

    MiniGrid-style semantics: forward moves unless blocked (goal pays the
    sparse reward and finishes), pickup grabs a facing key into empty hands,
    toggle opens a locked door only while carrying the matching-color key,
    and hitting the horizon finishes with reward 0.
    """
    if env.done:
        raise RuntimeError("episode is finished")
    action = Action(int(action))
    env.t += 1
    reward = 0.0

    if action == Action.LEFT:
        env.agent_dir = (env.agent_dir - 1) % 4
    elif action == Action.RIGHT:
        env.agent_dir = (env.agent_dir + 1) % 4
    else:
        dx, dy = DIR_VECTORS[env.agent_dir]
        front = (env.agent_pos[0] + dx, env.agent_pos[1] + dy)
        ftype = env.types[front]
        if action == Action.FORWARD:
            if ftype == TYPE_GOAL:
                env.agent_pos = front
                reward = 1.0 - 0.9 * env.t / env.horizon
                env.done = True
            elif ftype == TYPE_EMPTY or (ftype == TYPE_DOOR and env.states[front] == STATE_OPEN):
                env.agent_pos = front
        elif action == Action.PICKUP:
            if env.carrying is None and ftype == TYPE_KEY:
                env.carrying = (TYPE_KEY, int(env.colors[front]))
                env.types[front] = TYPE_EMPTY
                env.colors[front] = 0
        elif action == Action.DROP:
            if env.carrying is not None and ftype == TYPE_EMPTY:
                env.types[front], env.colors[front] = env.carrying
                env.carrying = None
        elif action == Action.TOGGLE:
            if ftype == TYPE_DOOR:
                st = env.states[front]
                if st == STATE_LOCKED:
                    if env.carrying is not None and env.carrying[1] == env.colors[front]:
                        env.states[front] = STATE_OPEN
                elif st == STATE_CLOSED:
                    env.states[front] = STATE_OPEN
                else:
                    env.states[front] = STATE_CLOSED
        # Action.DONE is a no-op

    if not env.done and env.t >= env.horizon:
        env.done = True
    return encode_observation(env), reward, env.done


_ROW_OFF = (VIEW - 1 - np.arange(VIEW))[:, None]   # cells ahead of the agent
_COL_OFF = (np.arange(VIEW) - VIEW // 2)[None, :]  # lateral offset, right positive


def encode_observation(env: GridEnv) -> np.ndarray:
    """Egocentric (5, 5, 3) int8 view: agent at bottom-center, facing up."""
    fx, fy = DIR_VECTORS[env.agent_dir]
    rx, ry = DIR_VECTORS[(env.agent_dir + 1) % 4]
    wx = env.agent_pos[0] + fx * _ROW_OFF + rx * _COL_OFF
    wy = env.agent_pos[1] + fy * _ROW_OFF + ry * _COL_OFF
    inside = (wx >= 0) & (wx < env.width) & (wy >= 0) & (wy < env.height)
    cx = np.clip(wx, 0, env.width - 1)
    cy = np.clip(wy, 0, env.height - 1)
    obs = np.empty((VIEW, VIEW, 3), dtype=np.int8)
    obs[..., 0] = np.where(inside, env.types[cx, cy], TYPE_WALL)
    obs[..., 1] = np.where(inside, env.colors[cx, cy], WALL_COLOR)
    obs[..., 2] = np.where(inside, env.states[cx, cy], 0)
    obs[~_visibility(obs)] = TYPE_UNSEEN
    return obs


def _visibility(obs: np.ndarray) -> np.ndarray:
    """Light flood from the agent cell; walls and non-open doors block."""
    through = ~(
        (obs[..., 0] == TYPE_WALL)
        | ((obs[..., 0] == TYPE_DOOR) & (obs[..., 2] != STATE_OPEN))
    )
    vis = np.zeros((VIEW, VIEW), dtype=bool)
    vis[VIEW - 1, VIEW // 2] = True
    for row in range(VIEW - 1, -1, -1):
        for col in range(VIEW - 1):
            if vis[row, col] and through[row, col]:
                vis[row, col + 1] = True
                if row > 0:
                    vis[row - 1, col + 1] = True
                    vis[row - 1, col] = True
        for col in range(VIEW - 1, 0, -1):
            if vis[row, col] and through[row, col]:
                vis[row, col - 1] = True
                if row > 0:
                    vis[row - 1, col - 1] = True
                    vis[row - 1, col] = True
    return vis


def to_json(env: GridEnv) -> str:
    """Compact dump: one record per non-empty cell plus the agent pose."""
    cells = [
        {"x": int(x), "y": int(y), "type": int(env.types[x, y]),
         "color": int(env.colors[x, y]), "state": int(env.states[x, y])}
        for x in range(env.width)
        for y in range(env.height)
        if env.types[x, y] != TYPE_EMPTY
    ]
    return json.dumps({
        "width": env.width, "height": env.height, "horizon": env.horizon,
        "domain_color": int(env.domain_color), "t": env.t, "done": env.done,
        "layout_seed": env.layout_seed,
        "agent": {"pos": list(env.agent_pos), "dir": env.agent_dir,
                  "carrying": list(env.carrying) if env.carrying else None},
        "cells": cells,
    })


def from_json(text: str) -> GridEnv:
    d = json.loads(text)
    types = np.full((d["width"], d["height"]), TYPE_EMPTY, dtype=np.int8)
    colors = np.zeros_like(types)
    states = np.zeros_like(types)
    for c in d["cells"]:
        types[c["x"], c["y"]] = c["type"]
        colors[c["x"], c["y"]] = c["color"]
        states[c["x"], c["y"]] = c["state"]
    agent = d["agent"]
    return GridEnv(
        d["width"], d["height"], types, colors, states,
        tuple(agent["pos"]), agent["dir"], d["domain_color"], d["horizon"],
        carrying=tuple(agent["carrying"]) if agent["carrying"] else None,
        t=d["t"], done=d["done"], layout_seed=d.get("layout_seed", 0),
    )


def render_ascii(env: GridEnv) -> str:
    """Debug rendering; the agent is one of > v < ^ by heading."""
    glyphs = {TYPE_EMPTY: ".", TYPE_WALL: "#", TYPE_KEY: "k", TYPE_GOAL: "G"}
    door = {STATE_OPEN: "/", STATE_CLOSED: "+", STATE_LOCKED: "L"}
    rows = []
    for y in range(env.height):
        row = []
        for x in range(env.width):
            if (x, y) == env.agent_pos:
                row.append(">v<^"[env.agent_dir])
            elif env.types[x, y] == TYPE_DOOR:
                row.append(door[int(env.states[x, y])])
            else:
                row.append(glyphs[int(env.types[x, y])])
        rows.append("".join(row))
    return "\n".join(rows)


def clone(env: GridEnv) -> GridEnv:
    """Independent copy (cheaper than deepcopy for search and evaluation)."""
    return GridEnv(
        env.width, env.height, env.types.copy(), env.colors.copy(),
        env.states.copy(), env.agent_pos, env.agent_dir, env.domain_color,
        env.horizon, env.carrying, env.t, env.done, env.layout_seed,
    )
