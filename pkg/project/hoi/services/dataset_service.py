"""
Synthetic HOI dataset generator.

Every sequence is a chain of scripted actions on one primitive object. An
action reaches the object with one or both hands, manipulates it while the
hands stay rigidly attached, then releases and returns the hands to rest.
Grasp poses come from an exact clearance solve against the object's convex
parts, and every finished sequence is checked for penetration and contact
before it is accepted. Captions are built from the contact actually
measured during each action's grasp frames.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from ..domain import FRAME_WIDTH, LEFT_SLICE, RIGHT_SLICE, Handedness, HOISequence
from ..utils.rotation_utils import axis_angle_matrix, matrix_to_rot6d, slerp_matrices, smoothstep, yaw_matrix
from .config_service import KinematicsConfig
from .geometry_service import hand_object_min_distance, sequence_iv
from .kinematics_service import (
    OBJECT_CAPTION_NAMES, KinematicsError, ObjectModel, build_object_model, curl_rotation,
    get_hand_model, hand_forward_kinematics, pose_object,
)

logger = logging.getLogger(__name__)

LEFT, RIGHT = Handedness.LEFT, Handedness.RIGHT
HANDS = (LEFT, RIGHT)

SCRIPT_VERBS = {
    'approach': 'approach',
    'grasp': 'grasp',
    'lift': 'lift',
    'rotate': 'rotate',
    'pass': 'pass',
    'open_lid': 'open',
}

REST_POSITIONS = {LEFT: np.array([0.0, -0.35, 0.12]), RIGHT: np.array([0.0, 0.35, 0.12])}
REST_CURL = 0.1
OPEN_CURL = 0.15
GRASP_CURL = 0.6
PRE_GRASP_DISTANCE = 0.12
CONTACT_GAP = 0.002
LIFT_HEIGHT = 0.1
LID_OPEN_ANGLE = 1.2
PASS_SHIFT = 0.08

# Per-joint share of the curl angle, index to pinky then thumb.
_CURL_PROFILE = np.array([1.0, 1.2, 0.8])
_THUMB_PROFILE = np.array([0.6, 0.8, 0.6])

# Palm center in the wrist frame; the clearance solve aligns it with the grasp target.
_PALM_CENTER = np.array([0.05, 0.0, 0.0])

# Side grasps: palm faces the object, fingers along +x, thumb down.
_SIDE_ROTATIONS = {
    RIGHT: np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]]),
    LEFT: np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
}
_SIDE_DIRECTIONS = {RIGHT: np.array([0.0, 1.0, 0.0]), LEFT: np.array([0.0, -1.0, 0.0])}

# Canonical lid grasp target, near the edge opposite the hinge.
_LID_TARGET = np.array([0.0, 0.02, 0.04])


class InfeasibleScript(KinematicsError):
    """A scripted action cannot be realised without penetration or missed contact"""
    pass


@dataclass
class HandState:
    position: np.ndarray
    rotation: np.ndarray
    curl: float

    def vector(self) -> np.ndarray:
        joints = []
        for finger in range(5):
            profile = _THUMB_PROFILE if finger == 0 else _CURL_PROFILE
            joints.extend(matrix_to_rot6d(curl_rotation(self.curl * share)) for share in profile)
        return np.concatenate([self.position, matrix_to_rot6d(self.rotation), np.concatenate(joints)])


@dataclass
class ObjectState:
    position: np.ndarray
    rotation: np.ndarray
    alpha: float = 0.0

    def vector(self) -> np.ndarray:
        return np.concatenate([self.position, matrix_to_rot6d(self.rotation), [self.alpha]])


def rest_state(hand: Handedness) -> HandState:
    return HandState(REST_POSITIONS[hand].copy(), np.eye(3), REST_CURL)


def _part_transform(model: ObjectModel, state: ObjectState, part: str) -> Tuple[np.ndarray, np.ndarray]:
    """World (R, t) of the object body or its hinged lid."""
    if part == 'lid' and model.hinge is not None:
        hinge = axis_angle_matrix(model.hinge.axis, state.alpha)
        shift = model.hinge.origin - hinge @ model.hinge.origin
        return state.rotation @ hinge, state.rotation @ shift + state.position
    return state.rotation, state.position


@dataclass
class _Attachment:
    part: str
    rotation: np.ndarray
    offset: np.ndarray


@dataclass
class SequenceBuilder:
    """
    Emits frames while tracking object and hand state. Attached hands keep
    their pose relative to the part they hold while the object moves.
    """
    model: ObjectModel
    obj: ObjectState
    hands: Dict[Handedness, HandState] = field(default_factory=lambda: {h: rest_state(h) for h in HANDS})
    attached: Dict[Handedness, _Attachment] = field(default_factory=dict)
    contact: Set[Handedness] = field(default_factory=set)
    frames: List[np.ndarray] = field(default_factory=list)
    contact_flags: List[Tuple[bool, bool]] = field(default_factory=list)

    def emit(self) -> None:
        vector = np.zeros(FRAME_WIDTH)
        vector[:10] = self.obj.vector()
        vector[LEFT_SLICE] = self.hands[LEFT].vector()
        vector[RIGHT_SLICE] = self.hands[RIGHT].vector()
        self.frames.append(vector)
        self.contact_flags.append((LEFT in self.contact, RIGHT in self.contact))

    def hold(self, count: int) -> None:
        for _ in range(count):
            self.emit()

    def move_hands(self, targets: Dict[Handedness, HandState], count: int) -> None:
        if count <= 0:
            self.hands.update(targets)
            return
        fractions = smoothstep((np.arange(count) + 1) / count)
        paths = {}
        for hand, target in targets.items():
            start = self.hands[hand]
            paths[hand] = (start, target, slerp_matrices(start.rotation, target.rotation, fractions))
        for k, u in enumerate(fractions):
            for hand, (start, target, rotations) in paths.items():
                self.hands[hand] = HandState(start.position + u * (target.position - start.position),
                                             rotations[k], start.curl + u * (target.curl - start.curl))
            self.emit()

    def attach(self, hand: Handedness, part: str = 'body') -> None:
        rotation, translation = _part_transform(self.model, self.obj, part)
        state = self.hands[hand]
        self.attached[hand] = _Attachment(part, rotation.T @ state.rotation,
                                          rotation.T @ (state.position - translation))

    def detach(self, hand: Handedness) -> None:
        self.attached.pop(hand, None)
        self.contact.discard(hand)

    def move_object(self, target: ObjectState, count: int) -> None:
        start = self.obj
        fractions = smoothstep((np.arange(max(count, 1)) + 1) / max(count, 1))
        rotations = slerp_matrices(start.rotation, target.rotation, fractions)
        for k, u in enumerate(fractions):
            self.obj = ObjectState(start.position + u * (target.position - start.position), rotations[k],
                                   start.alpha + u * (target.alpha - start.alpha))
            for hand, link in self.attached.items():
                rotation, translation = _part_transform(self.model, self.obj, link.part)
                held = self.hands[hand]
                self.hands[hand] = HandState(translation + rotation @ link.offset, rotation @ link.rotation,
                                             held.curl)
            if count > 0:
                self.emit()


# ---------------------------------------------------------------------------
# Grasp solve
# ---------------------------------------------------------------------------

def hand_offsets(hand: Handedness, rotation: np.ndarray, curl: float) -> np.ndarray:
    """Surface vertices of a hand at the origin with the given wrist rotation and curl (V, 3)."""
    state = HandState(np.zeros(3), rotation, curl)
    _, vertices = hand_forward_kinematics(state.vector(), get_hand_model(hand))
    return vertices


def clearance_distance(offsets: np.ndarray, base: np.ndarray, direction: np.ndarray, parts) -> float:
    """
    Smallest s such that base + s * direction + offsets lies outside every
    convex part for all s' >= s.

    Each vertex travels on a line; its intersection with a convex part is an
    interval, and the answer is the largest interval end.

    Raises:
        InfeasibleScript: if no vertex line ever meets the object
    """
    points = base + offsets
    exits = []
    for part in parts:
        a = points @ part.normals.T + part.offsets
        b = part.normals @ direction
        with np.errstate(divide='ignore', invalid='ignore'):
            bounds = -a / b
        upper = np.where(b > 1e-12, bounds, np.inf).min(axis=1)
        lower = np.where(b < -1e-12, bounds, -np.inf).max(axis=1)
        parallel_ok = np.all(np.where(np.abs(b) <= 1e-12, a <= 0, True), axis=1)
        hit = (lower <= upper) & parallel_ok & np.isfinite(upper)
        if np.any(hit):
            exits.append(float(upper[hit].max()))
    if not exits:
        raise InfeasibleScript("Hand never meets the object along the approach direction")
    return max(exits)


def solve_grasp(model: ObjectModel, obj: ObjectState, hand: Handedness, approach: str,
                curl: float) -> Tuple[HandState, np.ndarray]:
    """
    Grasp pose touching the object with a CONTACT_GAP clearance.

    Args:
        approach: 'side' (palm toward the object from the hand's own side) or
            'lid' (palm down onto the hinged lid)

    Returns:
        (hand state at contact, unit retreat direction)
    """
    posed = pose_object(model, obj.vector(), clamp=True)
    if approach == 'lid':
        if model.hinge is None:
            raise InfeasibleScript(f"'{model.name}' has no lid")
        rotation, translation = _part_transform(model, obj, 'lid')
        target = rotation @ _LID_TARGET + translation
        direction = rotation @ np.array([0.0, 0.0, 1.0])
        hand_rotation = rotation.copy()
    else:
        target = obj.position.copy()
        direction = _SIDE_DIRECTIONS[hand].copy()
        hand_rotation = _SIDE_ROTATIONS[hand].copy()

    offsets = hand_offsets(hand, hand_rotation, curl)
    base = target - hand_rotation @ _PALM_CENTER
    s = clearance_distance(offsets, base, direction, posed.parts) + CONTACT_GAP
    return HandState(base + s * direction, hand_rotation, curl), direction


# ---------------------------------------------------------------------------
# Scripts
# ---------------------------------------------------------------------------

def _split(total: int, fractions: Sequence[float]) -> List[int]:
    """Integer phase lengths proportional to fractions that sum to total."""
    raw = np.asarray(fractions, dtype=np.float64) / np.sum(fractions) * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind='stable')[:total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _reach(b: SequenceBuilder, hands: Sequence[Handedness], approach: str, curl: float,
           counts: Sequence[int]) -> Dict[Handedness, np.ndarray]:
    """Pre-grasp, straight approach, then close the fingers. Returns retreat directions."""
    grasps = {h: solve_grasp(b.model, b.obj, h, approach, curl) for h in hands}
    b.move_hands({h: HandState(g.position + PRE_GRASP_DISTANCE * d, g.rotation, OPEN_CURL)
                  for h, (g, d) in grasps.items()}, counts[0])
    b.move_hands({h: HandState(g.position, g.rotation, OPEN_CURL) for h, (g, _) in grasps.items()}, counts[1])
    b.contact.update(hands)
    b.move_hands({h: g for h, (g, _) in grasps.items()}, counts[2])
    return {h: d for h, (_, d) in grasps.items()}


def _release(b: SequenceBuilder, hands: Sequence[Handedness], directions: Dict[Handedness, np.ndarray],
             counts: Sequence[int]) -> None:
    """Open, back off along the retreat direction, return to rest."""
    for h in hands:
        b.detach(h)
    b.move_hands({h: HandState(b.hands[h].position, b.hands[h].rotation, OPEN_CURL) for h in hands}, counts[0])
    b.move_hands({h: HandState(b.hands[h].position + PRE_GRASP_DISTANCE * directions[h], b.hands[h].rotation,
                               OPEN_CURL) for h in hands}, counts[1])
    b.move_hands({h: rest_state(h) for h in hands}, counts[2])


def _script_simple(b: SequenceBuilder, hands, length: int, rng, curl: float, manipulate: Optional[str]):
    if manipulate is None:
        reach, hold, release = _split(length, [45, 30, 25])
        directions = _reach(b, hands, 'side', curl, _split(reach, [25, 15, 5]))
        b.hold(hold)
    else:
        reach, act, release = _split(length, [35, 45, 20])
        directions = _reach(b, hands, 'side', curl, _split(reach, [25, 15, 5]))
        for h in hands:
            b.attach(h)
        start = b.obj
        if manipulate == 'lift':
            up, top, down = _split(act, [45, 20, 35])
            lifted = ObjectState(start.position + [0.0, 0.0, LIFT_HEIGHT], start.rotation, start.alpha)
            b.move_object(lifted, up)
            b.hold(top)
            b.move_object(start, down)
        else:
            turn, still = _split(act, [65, 35])
            angle = float(rng.choice([-1.0, 1.0])) * np.pi / 2
            turned = ObjectState(start.position.copy(), yaw_matrix(angle) @ start.rotation, start.alpha)
            b.move_object(turned, turn)
            b.hold(still)
        directions = {h: b.hands[h].rotation @ _SIDE_ROTATIONS[h].T @ directions[h] for h in hands}
    _release(b, hands, directions, _split(release, [25, 35, 40]))


def _script_open_lid(b: SequenceBuilder, hands, length: int, rng, curl: float):
    if b.model.hinge is None or b.obj.alpha > 1e-6:
        raise InfeasibleScript("open_lid needs a closed hinged object")
    reach, opening, hold, release = _split(length, [35, 30, 10, 25])
    _reach(b, hands, 'lid', curl, _split(reach, [25, 15, 5]))
    for h in hands:
        b.attach(h, 'lid')
    target = ObjectState(b.obj.position.copy(), b.obj.rotation.copy(), min(LID_OPEN_ANGLE, b.model.alpha_max))
    b.move_object(target, opening)
    b.hold(hold)
    rotation, _ = _part_transform(b.model, b.obj, 'lid')
    _release(b, hands, {h: rotation @ np.array([0.0, 0.0, 1.0]) for h in hands}, _split(release, [25, 35, 40]))


def _script_pass(b: SequenceBuilder, giver: Handedness, length: int, rng, curl: float):
    receiver = LEFT if giver == RIGHT else RIGHT
    reach, carry, take, hand_over, release = _split(length, [25, 15, 25, 15, 20])
    directions = _reach(b, [giver], 'side', curl, _split(reach, [25, 15, 5]))
    b.attach(giver)
    start = b.obj
    shift = -_SIDE_DIRECTIONS[giver] * PASS_SHIFT + [0.0, 0.0, 0.5 * LIFT_HEIGHT]
    b.move_object(ObjectState(start.position + shift, start.rotation, start.alpha), carry)
    directions.update(_reach(b, [receiver], 'side', curl, _split(take, [25, 15, 5])))
    b.attach(receiver)
    _release(b, [giver], directions, _split(hand_over, [25, 35, 40]))
    _release(b, [receiver], directions, _split(release, [25, 35, 40]))


@dataclass
class ActionRecord:
    script: str
    hands: Tuple[Handedness, ...]
    start: int
    end: int


def run_script(b: SequenceBuilder, script: str, hands: Sequence[Handedness], length: int,
               rng: np.random.Generator, curl: float = GRASP_CURL) -> ActionRecord:
    """Append one action to the builder and return the frames it covers."""
    start = len(b.frames)
    hands = tuple(sorted(hands, key=lambda h: HANDS.index(h)))
    if script == 'approach':
        _script_simple(b, hands, length, rng, OPEN_CURL, None)
    elif script == 'grasp':
        _script_simple(b, hands, length, rng, curl, None)
    elif script in ('lift', 'rotate'):
        _script_simple(b, hands, length, rng, curl, script)
    elif script == 'open_lid':
        _script_open_lid(b, hands, length, rng, curl)
    elif script == 'pass':
        _script_pass(b, hands[0], length, rng, curl)
        hands = HANDS
    else:
        raise InfeasibleScript(f"Unknown script '{script}'")
    return ActionRecord(script, hands, start, len(b.frames))


# ---------------------------------------------------------------------------
# Validation and captions
# ---------------------------------------------------------------------------

def hand_phrase(hands: Sequence[Handedness]) -> str:
    hands = set(hands)
    if hands == {LEFT, RIGHT}:
        return 'both hands'
    return f"the {next(iter(hands)).value} hand"


def caption_clause(script: str, object_name: str, hands: Sequence[Handedness]) -> str:
    return f"{SCRIPT_VERBS[script]} the {OBJECT_CAPTION_NAMES.get(object_name, object_name)} with {hand_phrase(hands)}"


def measured_contact(frames: np.ndarray, flags: np.ndarray, model: ObjectModel, threshold: float,
                     actions: Sequence[ActionRecord]) -> List[Tuple[Handedness, ...]]:
    """
    Hands in contact per action: a hand counts when it is within threshold
    of the object surface in every grasp frame of that action.

    Raises:
        InfeasibleScript: on penetration, or when an intended hand never reaches contact
    """
    count, depth = sequence_iv(frames, model, clamp=True)
    if count:
        raise InfeasibleScript(f"{count} hand vertices penetrate the object (max depth {depth:.4f})")
    distances = hand_object_min_distance(frames, model)
    measured = []
    for action in actions:
        window = slice(action.start, action.end)
        touching = []
        for column, hand in enumerate(HANDS):
            grasp = flags[window, column]
            if grasp.any() and np.all(distances[window, column][grasp] < threshold ** 2):
                touching.append(hand)
        if set(touching) != set(action.hands):
            raise InfeasibleScript(
                f"{action.script}: intended {[h.value for h in action.hands]}, "
                f"measured contact {[h.value for h in touching]}"
            )
        measured.append(tuple(touching))
    return measured


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def _compatible_scripts(scripts: Sequence[str], model: ObjectModel, lid_open: bool) -> List[str]:
    allowed = []
    for script in scripts:
        if script == 'open_lid' and (model.hinge is None or lid_open):
            continue
        allowed.append(script)
    return allowed


def _hand_choice(script: str, rng: np.random.Generator) -> Tuple[Handedness, ...]:
    if script == 'pass':
        return (HANDS[int(rng.integers(2))],)
    if script == 'open_lid':
        return (HANDS[int(rng.integers(2))],)
    options = [(LEFT,), (RIGHT,), (LEFT, RIGHT)]
    return options[int(rng.integers(len(options)))]


def generate_sequence(index: int, config: KinematicsConfig, object_models: Dict[str, ObjectModel],
                      seed: int) -> HOISequence:
    """
    One sequence from rng([seed, index]).

    Raises:
        InfeasibleScript: if the drawn actions fail the penetration or contact checks
    """
    rng = np.random.default_rng([seed, index])
    names = list(config.objects)
    name = names[int(rng.integers(len(names)))]
    model = object_models[name]
    start = ObjectState(np.array([rng.normal(0.0, config.noise), rng.normal(0.0, config.noise), 0.0]),
                        yaw_matrix(float(rng.uniform(-np.pi, np.pi))))
    builder = SequenceBuilder(model=model, obj=start)

    low, high = config.actions_per_sequence
    actions = []
    for _ in range(int(rng.integers(low, high + 1))):
        allowed = _compatible_scripts(config.scripts, model, builder.obj.alpha > 1e-6)
        if not allowed:
            raise InfeasibleScript(f"No script in {config.scripts} applies to '{name}'")
        script = allowed[int(rng.integers(len(allowed)))]
        hands = _hand_choice(script, rng)
        length = int(rng.integers(config.length_range[0], config.length_range[1] + 1))
        curl = float(np.clip(GRASP_CURL + rng.normal(0.0, 5.0 * config.noise), 0.3, 0.9))
        actions.append(run_script(builder, script, hands, length, rng, curl))

    frames = np.asarray(builder.frames, dtype=np.float32)
    flags = np.asarray(builder.contact_flags, dtype=bool)
    measured = measured_contact(frames, flags, model, config.contact_threshold, actions)
    caption = ' and then '.join(caption_clause(a.script, name, hands) for a, hands in zip(actions, measured))
    return HOISequence(features=frames, object_id=name, caption=caption, fps=config.fps, seed=seed,
                       grasp_frames=flags)


def build_object_models(config: KinematicsConfig) -> Dict[str, ObjectModel]:
    return {name: build_object_model(name, config.sample_count, config.point_count) for name in config.objects}


def generate_synthetic_dataset(config: KinematicsConfig, seed: int,
                               object_models: Optional[Dict[str, ObjectModel]] = None,
                               workers: int = 1) -> List[HOISequence]:
    """
    Generate config.count candidate sequences; infeasible ones are logged and skipped.

    Sequence i depends only on (seed, i), and results are merged in index
    order, so the output does not depend on the worker count.
    """
    models = object_models or build_object_models(config)

    def attempt(index: int) -> Optional[HOISequence]:
        try:
            return generate_sequence(index, config, models, seed)
        except InfeasibleScript as e:
            logger.warning(f"Skipping sequence {index} (seed {seed}): {e}")
            return None

    with ThreadPoolExecutor(max_workers=max(workers, 1)) as pool:
        results = list(pool.map(attempt, range(config.count)))
    sequences = [seq for seq in results if seq is not None]
    logger.info(f"Generated {len(sequences)}/{config.count} sequences with seed {seed}")
    return sequences


def split_dataset(sequences: Sequence[HOISequence], heldout_fraction: float) -> Tuple[List[HOISequence], List[HOISequence]]:
    """Last round(n * heldout_fraction) sequences are held out."""
    heldout = int(round(len(sequences) * heldout_fraction))
    cut = len(sequences) - heldout
    return list(sequences[:cut]), list(sequences[cut:])


def constant_velocity_sequence(object_name: str, num_frames: int, velocity: Sequence[float],
                               object_models: Optional[Dict[str, ObjectModel]] = None,
                               fps: int = 30) -> HOISequence:
    """Both hands resting and the object drifting together at a constant velocity (m/frame)."""
    velocity = np.asarray(velocity, dtype=np.float64)
    frames = []
    for t in range(num_frames):
        shift = velocity * t
        vector = np.zeros(FRAME_WIDTH)
        vector[:10] = ObjectState(shift, np.eye(3)).vector()
        for hand, span in ((LEFT, LEFT_SLICE), (RIGHT, RIGHT_SLICE)):
            state = rest_state(hand)
            vector[span] = HandState(state.position + shift, state.rotation, state.curl).vector()
        frames.append(vector)
    return HOISequence(features=np.asarray(frames), object_id=object_name,
                       caption=f"move the {OBJECT_CAPTION_NAMES.get(object_name, object_name)} with both hands",
                       fps=fps)
