"""Assembly data model, JSON / PDB ingestion, and decoy generation."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import RigidAction, apply_action, centroid, random_rotation_quat

RESTYPES = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
)  # fmt: skip
UNKNOWN_RESTYPE = 20
_RESTYPE_INDEX = {name: i for i, name in enumerate(RESTYPES)}


class StructureError(ValueError):
    """Malformed or inconsistent structure input."""


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ChainStructure:
    id: str
    coords: np.ndarray
    restypes: np.ndarray = None

    def __post_init__(self):
        coords = _frozen(self.coords)
        if coords.ndim != 2 or coords.shape[1] != 3 or len(coords) < 1:
            raise StructureError(f"chain {self.id!r}: coords must be a non-empty n x 3 array")
        if not np.all(np.isfinite(coords)):
            bad = int(np.argwhere(~np.isfinite(coords))[0, 0])
            raise StructureError(f"chain {self.id!r}: non-finite coordinate at residue {bad}")
        restypes = np.full(len(coords), UNKNOWN_RESTYPE) if self.restypes is None else self.restypes
        restypes = _frozen(restypes, dtype=np.int64)
        if restypes.shape != (len(coords),):
            raise StructureError(
                f"chain {self.id!r}: {len(restypes)} restypes for {len(coords)} residues"
            )
        if restypes.min() < 0 or restypes.max() > UNKNOWN_RESTYPE:
            raise StructureError(f"chain {self.id!r}: restype outside [0, {UNKNOWN_RESTYPE}]")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "restypes", restypes)

    def __len__(self):
        return len(self.coords)

    def with_coords(self, coords) -> "ChainStructure":
        return ChainStructure(self.id, coords, self.restypes)


def default_fixed_index(chains) -> int:
    """Largest chain, ties to the lowest index."""
    sizes = [len(c) for c in chains]
    return int(np.argmax(sizes))


@dataclass(frozen=True)
class AssemblyState:
    """N rigid chains as C-alpha point clouds; one chain is held fixed."""

    chains: tuple
    fixed_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "chains", tuple(self.chains))
        if len(self.chains) < 2:
            raise StructureError(f"assembly needs at least 2 chains, got {len(self.chains)}")
        if not 0 <= self.fixed_index < len(self.chains):
            raise StructureError(f"fixed_index {self.fixed_index} out of range")

    @property
    def n_chains(self) -> int:
        return len(self.chains)

    @property
    def sizes(self) -> tuple:
        return tuple(len(c) for c in self.chains)

    @property
    def mobile(self) -> list:
        return [i for i in range(self.n_chains) if i != self.fixed_index]

    def coords(self, i) -> np.ndarray:
        return self.chains[i].coords

    def centroids(self) -> np.ndarray:
        return np.array([centroid(c.coords) for c in self.chains])

    def all_coords(self) -> np.ndarray:
        return np.concatenate([c.coords for c in self.chains])

    def features(self, i) -> np.ndarray:
        """Per-residue features: ``[restype, chain index]``."""
        r = self.chains[i].restypes
        return np.column_stack([r, np.full(len(r), i)])

    def with_chain_coords(self, updates: dict) -> "AssemblyState":
        chains = list(self.chains)
        for i, X in updates.items():
            chains[i] = chains[i].with_coords(X)
        return AssemblyState(chains, self.fixed_index)

    def apply(self, joint: dict) -> "AssemblyState":
        """Apply a JointAction (chain index -> RigidAction)."""
        if self.fixed_index in joint and not joint[self.fixed_index].is_identity():
            raise StructureError("the fixed chain cannot move")
        return self.with_chain_coords(
            {i: apply_action(a, self.coords(i)) for i, a in joint.items() if i != self.fixed_index}
        )

    def rigid_motion(self, R, t) -> "AssemblyState":
        """Apply ``x -> R x + t`` to every chain (no re-normalisation)."""
        R = np.asarray(R, dtype=float)
        return self.with_chain_coords({i: c.coords @ R.T + t for i, c in enumerate(self.chains)})

    def normalized(self) -> "AssemblyState":
        """Shift so the fixed chain's centroid sits at the origin."""
        c = centroid(self.coords(self.fixed_index))
        return self.with_chain_coords({i: ch.coords - c for i, ch in enumerate(self.chains)})

    def relabel(self, order) -> "AssemblyState":
        order = list(order)
        return AssemblyState([self.chains[k] for k in order], order.index(self.fixed_index))


# -- JSON assembly format ------------------------------------------------------


def assembly_to_dict(state: AssemblyState) -> dict:
    return {
        "chains": [
            {"id": c.id, "coords": c.coords.tolist(), "restypes": c.restypes.tolist()}
            for c in state.chains
        ],
        "fixed": state.fixed_index,
    }


def assembly_from_dict(doc, normalize=True, source="<dict>") -> AssemblyState:
    if not isinstance(doc, dict) or not isinstance(doc.get("chains"), list):
        raise StructureError(f"{source}: expected an object with a 'chains' list")
    chains = []
    for ci, ch in enumerate(doc["chains"]):
        where = f"{source}: chains[{ci}]"
        if not isinstance(ch, dict):
            raise StructureError(f"{where}: expected an object")
        cid = ch.get("id", str(ci))
        if not isinstance(cid, str):
            raise StructureError(f"{where}.id: expected a string")
        coords = ch.get("coords")
        if not isinstance(coords, list) or not coords:
            raise StructureError(f"{where}.coords: expected a non-empty list")
        for ri, xyz in enumerate(coords):
            if not isinstance(xyz, list) or len(xyz) != 3:
                raise StructureError(f"{where}.coords[{ri}]: expected [x, y, z]")
            for v in xyz:
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                    raise StructureError(f"{where}.coords[{ri}]: non-finite or non-numeric {v!r}")
        restypes = ch.get("restypes")
        if restypes is not None:
            if not isinstance(restypes, list) or len(restypes) != len(coords):
                raise StructureError(f"{where}.restypes: expected {len(coords)} integers")
            for ri, r in enumerate(restypes):
                if isinstance(r, bool) or not isinstance(r, int) or not 0 <= r <= UNKNOWN_RESTYPE:
                    raise StructureError(f"{where}.restypes[{ri}]: invalid residue type {r!r}")
        chains.append(ChainStructure(cid, coords, restypes))
    fixed = doc.get("fixed")
    if fixed is None:
        fixed_index = default_fixed_index(chains)
    elif isinstance(fixed, bool):
        raise StructureError(f"{source}: 'fixed' must be a chain id or index")
    elif isinstance(fixed, int):
        fixed_index = fixed
    elif isinstance(fixed, str):
        ids = [c.id for c in chains]
        if fixed not in ids:
            raise StructureError(f"{source}: fixed chain {fixed!r} not among {ids}")
        fixed_index = ids.index(fixed)
    else:
        raise StructureError(f"{source}: 'fixed' must be a chain id or index")
    if not 0 <= fixed_index < len(chains):
        raise StructureError(f"{source}: fixed index {fixed_index} out of range")
    state = AssemblyState(chains, fixed_index)
    return state.normalized() if normalize else state


def load_assembly_json(path, normalize=True) -> AssemblyState:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StructureError(f"{path}: malformed JSON ({exc})") from exc
    return assembly_from_dict(doc, normalize=normalize, source=str(path))


def atomic_write_text(path, text: str):
    """Write via a temp file in the target directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_assembly_json(state: AssemblyState, path):
    atomic_write_text(path, json.dumps(assembly_to_dict(state)) + "\n")


# -- PDB C-alpha ingestion -----------------------------------------------------


def load_pdb_calpha(path, normalize=True, fixed_index=None) -> AssemblyState:
    """One chain per chain identifier from fixed-column ATOM records, CA atoms only.

    Alternate locations keep the highest occupancy; only the first MODEL is read.
    """
    residues = {}  # chain -> {(resseq, icode): (occupancy, xyz, restype)}
    order = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            rec = line[:6]
            if rec.startswith("ENDMDL"):
                break
            if rec != "ATOM  ":
                continue
            if line[12:16].strip() != "CA":
                continue
            chain = line[21:22]
            key = (line[22:26], line[26:27])
            try:
                xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
                occ_field = line[54:60].strip()
                occ = float(occ_field) if occ_field else 1.0
            except ValueError as exc:
                raise StructureError(f"{path}:{lineno}: malformed numeric field ({exc})") from exc
            if not all(math.isfinite(v) for v in xyz):
                raise StructureError(f"{path}:{lineno}: non-finite coordinate")
            restype = _RESTYPE_INDEX.get(line[17:20].strip(), UNKNOWN_RESTYPE)
            per_chain = residues.setdefault(chain, {})
            order.setdefault(chain, [])
            if key not in per_chain:
                order[chain].append(key)
                per_chain[key] = (occ, xyz, restype)
            elif occ > per_chain[key][0]:
                per_chain[key] = (occ, xyz, restype)
    if not residues:
        raise StructureError(f"{path}: no CA atoms found")
    chains = []
    for cid, keys in order.items():
        recs = [residues[cid][k] for k in keys]
        chains.append(ChainStructure(cid.strip() or "_", [r[1] for r in recs], [r[2] for r in recs]))
    if len(chains) < 2:
        raise StructureError(f"{path}: need at least two chains, found {len(chains)}")
    fixed = default_fixed_index(chains) if fixed_index is None else fixed_index
    state = AssemblyState(chains, fixed)
    return state.normalized() if normalize else state


def load_assembly(path, normalize=True) -> AssemblyState:
    """Dispatch on extension: ``.pdb``/``.ent`` vs JSON."""
    if str(path).lower().endswith((".pdb", ".ent")):
        return load_pdb_calpha(path, normalize=normalize)
    return load_assembly_json(path, normalize=normalize)


# -- decoys --------------------------------------------------------------------


@dataclass
class DecoySet:
    base: AssemblyState
    decoys: list
    energies: list = field(default=None)

    def __post_init__(self):
        if self.energies is None:
            self.energies = [None] * len(self.decoys)
        if len(self.energies) != len(self.decoys):
            raise StructureError("decoys and energies differ in length")
        for j, d in enumerate(self.decoys):
            a = d.get(self.base.fixed_index)
            if a is not None and not a.is_identity():
                raise StructureError(f"decoy {j} moves the fixed chain")

    def states(self):
        for d in self.decoys:
            yield self.base.apply(d)

    def __len__(self):
        return len(self.decoys)


def sample_rigid_actions(base: AssemblyState, rng, tr_scale=1.0, rot_mode="uniform", sigma=None, table=None):
    """One JointAction: per mobile chain a random rotation and an isotropic Gaussian shift.

    ``rot_mode`` is ``"uniform"`` (Haar), ``"igso3"`` (needs ``sigma``), or ``"none"``.
    """
    joint = {}
    for i in base.mobile:
        if rot_mode == "uniform":
            q = random_rotation_quat(rng)
        elif rot_mode == "igso3":
            from . import igso3

            tab = table if table is not None else igso3.default_table()
            q = RigidAction.from_matrix(igso3.draw_rotation(tab, sigma, rng)).quat
        elif rot_mode == "none":
            q = np.array([1.0, 0.0, 0.0, 0.0])
        else:
            raise ValueError(f"unknown rot_mode {rot_mode!r}")
        tr = np.zeros(3) if tr_scale == 0 else tr_scale * rng.standard_normal(3)
        joint[i] = RigidAction(q, tr)
    return joint


def generate_decoys(base: AssemblyState, count: int = 20, tr_scale=5.0, rot_mode="uniform", sigma=None, seed=0, table=None) -> DecoySet:
    """Random roto-translations of every mobile chain (fixed chain untouched).

    Each decoy draws from its own child stream of ``SeedSequence(seed)`` so that
    decoy ``j`` does not depend on how many others are generated.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(count)
    decoys = [
        sample_rigid_actions(base, np.random.Generator(np.random.PCG64(s)), tr_scale, rot_mode, sigma, table)
        for s in streams
    ]
    return DecoySet(base, decoys)


def score_decoys(ds: DecoySet, f) -> DecoySet:
    """Fill ``energies`` with ``f.evaluate`` on each decoy (the base is not a decoy)."""
    energies = [float(f.evaluate(s)) for s in ds.states()]
    return DecoySet(ds.base, list(ds.decoys), energies)


def joint_action_to_dict(joint: dict) -> dict:
    return {str(i): {"quat": a.quat.tolist(), "tr": a.tr.tolist()} for i, a in sorted(joint.items())}


def joint_action_from_dict(doc: dict) -> dict:
    return {int(k): RigidAction(v["quat"], v["tr"]) for k, v in doc.items()}


def decoys_to_jsonl(ds: DecoySet) -> str:
    lines = [
        json.dumps({"decoy": j, "chains": joint_action_to_dict(d), "energy": e})
        for j, (d, e) in enumerate(zip(ds.decoys, ds.energies))
    ]
    return "\n".join(lines) + "\n"


def save_decoys(ds: DecoySet, path):
    atomic_write_text(path, decoys_to_jsonl(ds))


def load_decoys(path, base: AssemblyState) -> DecoySet:
    decoys, energies = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                decoys.append(joint_action_from_dict(doc["chains"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise StructureError(f"{path}:{lineno}: malformed decoy record ({exc})") from exc
            energies.append(doc.get("energy"))
    return DecoySet(base, decoys, energies)
