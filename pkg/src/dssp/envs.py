"""Deterministic toy control tasks that exhibit observation aliasing.

All tasks share one embodiment: a point agent in the [-1, 1]^2 arena
driven by clipped velocity commands plus one press/grip channel
(d_action = 3).  Controllers move at most MAX_SPEED per step and land
exactly on a goal once within reach, so repeated visits to a landmark
produce bitwise-identical observations - which is what makes the aliasing
constructions exact rather than approximate.

Tasks:
  tapcount    -- tap a target three times, then return home.  The tap
                 counter is hidden; a one-frame flash marks a registered
                 tap, so the count is recoverable from history only.
  bufferswap  -- ferry an object between two end slots through a middle
                 buffer slot.  Direction is chosen per seed and hidden;
                 at the buffer the observation is identical for both.
  bottleplace -- carry two bottles from an opaque dispenser to an opaque
                 basket, then return home.  Remaining/placed counts are
                 hidden, so "after first drop" and "after second drop"
                 look identical.
  reach       -- plain goal reaching; fully observed (Markovian control).

Observation layout is scene features followed by proprioceptive features
per the task descriptor.  Expert controllers read the hidden true state
(they are privileged); policies only ever see observations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import DsspError

MAX_SPEED = 0.15
RADIUS = 0.1          # tap/slot/home capture radius
PRESS_THRESHOLD = 0.5
SNAP_EPS = 1e-9       # docking distance: landing this close puts the agent exactly on a landmark
D_ACTION = 3

ENV_NAMES = ("tapcount", "bufferswap", "bottleplace", "reach")


@dataclass(frozen=True)
class EnvDescriptor:
    name: str
    scene_dim: int
    proprio_dim: int
    action_dim: int
    max_steps: int
    aliased: bool

    @property
    def obs_dim(self) -> int:
        return self.scene_dim + self.proprio_dim


@dataclass
class Trajectory:
    """One episode: T+1 observations, T actions."""

    observations: np.ndarray  # [T+1, obs_dim]
    actions: np.ndarray       # [T, action_dim]
    success: bool
    env_name: str
    seed: int

    @property
    def length(self) -> int:
        return self.actions.shape[0]


def _clip_velocity(v: np.ndarray) -> np.ndarray:
    speed = float(np.hypot(v[0], v[1]))
    if speed > MAX_SPEED:
        return v * (MAX_SPEED / speed)
    return v


def _toward(pos: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Velocity command that lands exactly on the goal once within reach."""
    err = goal - pos
    dist = float(np.hypot(err[0], err[1]))
    if dist <= MAX_SPEED:
        return err
    return err * (MAX_SPEED / dist)


class Env:
    """Base: deterministic dynamics, seeded reset, privileged expert."""

    descriptor: EnvDescriptor

    def __init__(self, seed: int = 0):
        self.default_seed = seed
        self.pos = np.zeros(2)
        self.prev_press = 0.0
        self.t = 0
        self.done = False
        self.success = False

    # subclasses fill these in
    def _reset_state(self, rng: np.random.Generator) -> None:
        raise NotImplementedError

    def _landmarks(self) -> list:
        return []

    def _scene(self) -> np.ndarray:
        raise NotImplementedError

    def _proprio(self) -> np.ndarray:
        return self.pos.copy()

    def _apply_events(self, press: float) -> None:
        raise NotImplementedError

    def _check_success(self) -> bool:
        raise NotImplementedError

    def expert_action(self) -> np.ndarray:
        raise NotImplementedError

    # shared machinery
    def observe(self) -> np.ndarray:
        return np.concatenate([self._scene(), self._proprio()])

    def reset(self, seed: int | None = None) -> np.ndarray:
        rng = np.random.Generator(np.random.PCG64(self.default_seed if seed is None else seed))
        self.t = 0
        self.done = False
        self.success = False
        self.prev_press = 0.0
        self._reset_state(rng)
        return self.observe()

    def step(self, action: np.ndarray) -> tuple[np.ndarray, bool, bool]:
        if self.done:
            raise DsspError("step() called on a finished episode")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (D_ACTION,):
            raise DsspError(f"action shape {action.shape} != ({D_ACTION},)")
        self.pos = np.clip(self.pos + _clip_velocity(action[:2]), -1.0, 1.0)
        # Dock onto a landmark when numerically on top of it: repeated visits
        # then reproduce bitwise-identical observations, which the aliasing
        # constructions rely on.
        for mark in self._landmarks():
            if np.hypot(*(self.pos - mark)) <= SNAP_EPS:
                self.pos = mark.copy()
                break
        self._apply_events(float(action[2]))
        self.prev_press = float(action[2])
        self.t += 1
        self.success = self._check_success()
        self.done = self.success or self.t >= self.descriptor.max_steps
        return self.observe(), self.done, self.success


class TapCountEnv(Env):
    """Tap the target three times, then return home; taps are not observable.

    A tap registers on a press rising edge within RADIUS of the target.
    The scene shows target, home, and a flash that is 1 only on the frame
    right after a registered tap.  Start pose: home + uniform(+-0.15)^2.
    """

    HOME = np.array([-0.7, -0.7])
    TARGET = np.array([0.6, 0.6])
    REQUIRED_TAPS = 3
    descriptor = EnvDescriptor("tapcount", scene_dim=5, proprio_dim=2,
                               action_dim=D_ACTION, max_steps=80, aliased=True)

    def _reset_state(self, rng):
        self.pos = self.HOME + rng.uniform(-0.15, 0.15, size=2)
        self.taps = 0
        self.flash = 0.0

    def _landmarks(self):
        return [self.TARGET, self.HOME]

    def _scene(self):
        return np.concatenate([self.TARGET, self.HOME, [self.flash]])

    def _apply_events(self, press):
        self.flash = 0.0
        near = np.hypot(*(self.pos - self.TARGET)) <= RADIUS
        rising = press > PRESS_THRESHOLD and self.prev_press <= PRESS_THRESHOLD
        if near and rising:
            self.taps += 1
            self.flash = 1.0

    def _check_success(self):
        return (self.taps == self.REQUIRED_TAPS
                and np.hypot(*(self.pos - self.HOME)) <= RADIUS)

    def expert_action(self):
        a = np.zeros(D_ACTION)
        if self.taps < self.REQUIRED_TAPS:
            if np.hypot(*(self.pos - self.TARGET)) <= RADIUS:
                # alternate press/release so each press is a rising edge
                a[2] = 0.0 if self.prev_press > PRESS_THRESHOLD else 1.0
            else:
                a[:2] = _toward(self.pos, self.TARGET)
        else:
            a[:2] = _toward(self.pos, self.HOME)
        return a

    def nominal_length(self) -> float:
        d1 = np.hypot(*(self.HOME - self.TARGET))
        return (2 * max(d1 - RADIUS, 0.0) / MAX_SPEED) + 2 * self.REQUIRED_TAPS


class BufferSwapEnv(Env):
    """Move the object end-to-end through the middle buffer slot.

    The seed picks the direction (left-to-right or right-to-left) with
    equal probability; nothing in the observation reveals it.  While the
    object sits dropped at the buffer, both directions produce the same
    observation but opposite expert motions.
    """

    LEFT = np.array([-0.6, 0.0])
    RIGHT = np.array([0.6, 0.0])
    BUFFER = np.array([0.0, 0.0])
    START = np.array([0.0, -0.7])
    descriptor = EnvDescriptor("bufferswap", scene_dim=2, proprio_dim=3,
                               action_dim=D_ACTION, max_steps=80, aliased=True)

    def _reset_state(self, rng):
        self.pos = self.START + rng.uniform(-0.15, 0.15, size=2)
        self.rightward = bool(rng.integers(2))  # True: LEFT -> BUFFER -> RIGHT
        self.obj = (self.LEFT if self.rightward else self.RIGHT).copy()
        self.carrying = False
        self.via_buffer = False

    def _landmarks(self):
        return [self.LEFT, self.RIGHT, self.BUFFER]

    @property
    def origin(self):
        return self.LEFT if self.rightward else self.RIGHT

    @property
    def dest(self):
        return self.RIGHT if self.rightward else self.LEFT

    def _scene(self):
        return self.obj.copy()

    def _proprio(self):
        return np.concatenate([self.pos, [1.0 if self.carrying else 0.0]])

    def _apply_events(self, press):
        grip = press > PRESS_THRESHOLD
        if self.carrying:
            self.obj = self.pos.copy()
            if not grip:
                self.carrying = False
                if np.hypot(*(self.obj - self.BUFFER)) <= RADIUS:
                    self.via_buffer = True
        elif grip and np.hypot(*(self.pos - self.obj)) <= RADIUS:
            self.carrying = True
            self.obj = self.pos.copy()

    def _check_success(self):
        return (not self.carrying and self.via_buffer
                and np.hypot(*(self.obj - self.dest)) <= RADIUS)

    def expert_action(self):
        a = np.zeros(D_ACTION)
        goal = self.BUFFER if not self.via_buffer else self.dest
        if self.carrying:
            if np.hypot(*(self.pos - goal)) == 0.0:
                a[2] = 0.0  # release exactly on the slot
            else:
                a[:2] = _toward(self.pos, goal)
                a[2] = 1.0
        else:
            if np.hypot(*(self.pos - self.obj)) == 0.0:
                a[2] = 1.0  # grab
            else:
                a[:2] = _toward(self.pos, self.obj)
        return a

    def nominal_length(self) -> float:
        legs = (np.hypot(*(self.START - self.origin))
                + np.hypot(*(self.origin - self.BUFFER))
                + np.hypot(*(self.BUFFER - self.dest)))
        return legs / MAX_SPEED + 4  # two grabs, two releases


class BottlePlaceEnv(Env):
    """Place two bottles from the dispenser into the basket, then go home.

    Both containers are opaque: the observation never shows how many
    bottles remain or how many are placed, only the (seed-jittered)
    container positions, the agent, and the carry flag.
    """

    DISPENSER = np.array([-0.6, 0.5])
    BASKET = np.array([0.6, 0.5])
    HOME = np.array([0.0, -0.7])
    BOTTLES = 2
    descriptor = EnvDescriptor("bottleplace", scene_dim=4, proprio_dim=3,
                               action_dim=D_ACTION, max_steps=120, aliased=True)

    def _reset_state(self, rng):
        self.pos = self.HOME + rng.uniform(-0.15, 0.15, size=2)
        self.dispenser = self.DISPENSER + rng.uniform(-0.1, 0.1, size=2)
        self.basket = self.BASKET + rng.uniform(-0.1, 0.1, size=2)
        self.remaining = self.BOTTLES
        self.placed = 0
        self.carrying = False

    def _landmarks(self):
        return [self.dispenser, self.basket, self.HOME]

    def _scene(self):
        return np.concatenate([self.dispenser, self.basket])

    def _proprio(self):
        return np.concatenate([self.pos, [1.0 if self.carrying else 0.0]])

    def _apply_events(self, press):
        grip = press > PRESS_THRESHOLD
        if self.carrying:
            if not grip:
                self.carrying = False
                if np.hypot(*(self.pos - self.basket)) <= RADIUS:
                    self.placed += 1
                else:
                    self.remaining += 1  # dropped outside: bottle goes back
        elif (grip and self.remaining > 0
              and np.hypot(*(self.pos - self.dispenser)) <= RADIUS):
            self.carrying = True
            self.remaining -= 1

    def _check_success(self):
        return (self.placed == self.BOTTLES
                and np.hypot(*(self.pos - self.HOME)) <= RADIUS)

    def expert_action(self):
        a = np.zeros(D_ACTION)
        if self.carrying:
            if np.hypot(*(self.pos - self.basket)) == 0.0:
                a[2] = 0.0  # drop
            else:
                a[:2] = _toward(self.pos, self.basket)
                a[2] = 1.0
        elif self.placed < self.BOTTLES:
            if np.hypot(*(self.pos - self.dispenser)) == 0.0:
                a[2] = 1.0  # pick up
            else:
                a[:2] = _toward(self.pos, self.dispenser)
        else:
            a[:2] = _toward(self.pos, self.HOME)
        return a

    def nominal_length(self) -> float:
        legs = (np.hypot(*(self.HOME - self.dispenser))
                + 3 * np.hypot(*(self.dispenser - self.basket))
                + np.hypot(*(self.basket - self.HOME)))
        return legs / MAX_SPEED + 4


class ReachEnv(Env):
    """Markovian control: go to the visible target."""

    descriptor = EnvDescriptor("reach", scene_dim=2, proprio_dim=2,
                               action_dim=D_ACTION, max_steps=40, aliased=False)

    def _reset_state(self, rng):
        self.pos = rng.uniform(-0.8, 0.8, size=2)
        self.target = rng.uniform(-0.8, 0.8, size=2)

    def _scene(self):
        return self.target.copy()

    def _apply_events(self, press):
        pass

    def _check_success(self):
        return np.hypot(*(self.pos - self.target)) <= RADIUS

    def expert_action(self):
        a = np.zeros(D_ACTION)
        a[:2] = _toward(self.pos, self.target)
        return a

    def nominal_length(self) -> float:
        return 1.0 / MAX_SPEED  # expected start-target distance is about 1


_ENV_CLASSES = {
    "tapcount": TapCountEnv,
    "bufferswap": BufferSwapEnv,
    "bottleplace": BottlePlaceEnv,
    "reach": ReachEnv,
}


def make_env(name: str, seed: int = 0) -> tuple[Env, EnvDescriptor]:
    if name not in _ENV_CLASSES:
        raise DsspError(f"unknown environment '{name}' (choose from {', '.join(ENV_NAMES)})")
    env = _ENV_CLASSES[name](seed)
    return env, env.descriptor


def descriptor_for(name: str) -> EnvDescriptor:
    if name not in _ENV_CLASSES:
        raise DsspError(f"unknown environment '{name}'")
    return _ENV_CLASSES[name].descriptor


def run_expert_episode(env: Env, seed: int) -> Trajectory:
    obs = [env.reset(seed)]
    acts = []
    done = False
    success = False
    while not done:
        a = env.expert_action()
        o, done, success = env.step(a)
        obs.append(o)
        acts.append(a)
    return Trajectory(observations=np.stack(obs), actions=np.stack(acts),
                      success=success, env_name=env.descriptor.name, seed=seed)


def episode_seed(dataset_seed: int, index: int) -> int:
    return dataset_seed * 1_000_003 + index


def generate_demos(name: str, n: int, seed: int) -> list[Trajectory]:
    """n successful expert episodes with distinct derived per-episode seeds."""
    if n < 1:
        raise DsspError("need at least one demonstration")
    env, _ = make_env(name, seed)
    out = []
    for i in range(n):
        traj = run_expert_episode(env, episode_seed(seed, i))
        if not traj.success:
            raise DsspError(f"expert failed on {name} seed {traj.seed}; refusing to emit bad demos")
        out.append(traj)
    return out
