"""Extended prompt space: a (timestep x layer-group) grid of prompt embeddings.

The grid stores a small number of *slots*; each (row, group) cell is a view of
one slot. How cells map to slots is fixed by the sharing mode, which is what
the P / P_t / P+ ablations vary.
"""
from __future__ import annotations

import hashlib
import logging
import re
import struct
from enum import Enum
from pathlib import Path
from typing import Collection, Iterable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)


class LayerGroup(str, Enum):
    APPEARANCE = "appearance"
    STRUCTURE = "structure"


GROUPS: tuple[LayerGroup, ...] = (LayerGroup.APPEARANCE, LayerGroup.STRUCTURE)

# U-Net resolution scale -> group. High resolutions carry appearance.
DEFAULT_RESOLUTION_GROUPS: dict[int, LayerGroup] = {
    64: LayerGroup.APPEARANCE,
    32: LayerGroup.APPEARANCE,
    16: LayerGroup.STRUCTURE,
    8: LayerGroup.STRUCTURE,
}


def group_for_resolution(resolution: int, table: dict[int, LayerGroup] | None = None) -> LayerGroup:
    table = DEFAULT_RESOLUTION_GROUPS if table is None else table
    try:
        return table[resolution]
    except KeyError:
        raise ValueError(f"no layer group registered for resolution {resolution}") from None


class EditClass(str, Enum):
    STRUCTURE_EDIT = "structure"
    APPEARANCE_EDIT = "appearance"
    GLOBAL_EDIT = "global"


class SharingMode(str, Enum):
    P = "P"
    P_T = "P_T"
    P_PLUS = "P_PLUS"
    P_STAR = "P_STAR"


_MODE_CODES = {SharingMode.P: 0, SharingMode.P_T: 1, SharingMode.P_PLUS: 2, SharingMode.P_STAR: 3}


def slot_layout(T: int, mode: SharingMode, n_groups: int = len(GROUPS)) -> np.ndarray:
    """(T, n_groups) table of slot ids for a sharing mode."""
    mode = SharingMode(mode)
    rows = np.arange(T)[:, None]
    cols = np.arange(n_groups)[None, :]
    if mode is SharingMode.P:
        table = np.zeros((T, n_groups), dtype=np.int64)
    elif mode is SharingMode.P_T:
        table = np.broadcast_to(rows, (T, n_groups))
    elif mode is SharingMode.P_PLUS:
        table = np.broadcast_to(cols, (T, n_groups))
    else:
        table = rows * n_groups + cols
    return np.array(table, dtype=np.int64)


# ---------------------------------------------------------------------------
# Prompt encoding
# ---------------------------------------------------------------------------

_WORD_RE = re.compile(r"[a-z0-9]+")
START_TOKEN = "<start>"
PAD_TOKEN = "<pad>"


def tokenize(prompt: str) -> list[str]:
    return _WORD_RE.findall(prompt.lower())


TOKEN_SCALE = 0.03


def token_vector(token: str, dim: int, scale: float = TOKEN_SCALE) -> np.ndarray:
    digest = hashlib.sha256(f"{dim}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return scale * rng.standard_normal(dim)


def encode_prompt(prompt: str, tokens: int = 8, dim: int = 64,
                  dtype: torch.dtype = torch.float64) -> torch.Tensor:
    """Deterministic (tokens, dim) embedding from a hash-seeded lookup table.

    Identical prompts always give bit-identical embeddings. Words beyond the
    token budget are dropped.
    """
    words = [START_TOKEN] + tokenize(prompt)
    words = words[:tokens] + [PAD_TOKEN] * max(0, tokens - len(words))
    table = np.stack([token_vector(w, dim) for w in words])
    return torch.from_numpy(table).to(dtype)


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

class PromptGrid:
    """Embeddings indexed by (row, layer group); rows are labelled by timestep.

    ``cell`` returns a view into slot storage, so writing through it obeys the
    sharing mode's aliasing.
    """

    def __init__(self, slots: torch.Tensor, layout: np.ndarray, mode: SharingMode,
                 snapshot: torch.Tensor, timesteps: Sequence[int] | None = None):
        self.slots = slots
        self.layout = layout
        self.sharing_mode = SharingMode(mode)
        self._snapshot = snapshot.clone()
        T = layout.shape[0]
        self.timesteps = tuple(range(T)) if timesteps is None else tuple(int(t) for t in timesteps)
        if len(self.timesteps) != T:
            raise ValueError("timestep labels must match the number of rows")
        self._row = {t: i for i, t in enumerate(self.timesteps)}
        self.frozen = False

    @property
    def T(self) -> int:
        return self.layout.shape[0]

    @property
    def tokens(self) -> int:
        return self.slots.shape[1]

    @property
    def dim(self) -> int:
        return self.slots.shape[2]

    @property
    def dtype(self) -> torch.dtype:
        return self.slots.dtype

    @property
    def source_snapshot(self) -> torch.Tensor:
        # defensive copy keeps the stored snapshot immutable
        return self._snapshot.clone()

    def snapshot_cell(self, row: int, group: LayerGroup) -> torch.Tensor:
        return self._snapshot[row, GROUPS.index(LayerGroup(group))]

    def row_of(self, t: int) -> int:
        try:
            return self._row[int(t)]
        except KeyError:
            raise KeyError(f"timestep {t} is not a row of this grid {self.timesteps[:3]}...") from None

    def slot_of(self, row: int, group: LayerGroup) -> int:
        return int(self.layout[row, GROUPS.index(LayerGroup(group))])

    def cell(self, row: int, group: LayerGroup) -> torch.Tensor:
        return self.slots[self.slot_of(row, group)]

    def set_cell(self, row: int, group: LayerGroup, value: torch.Tensor) -> None:
        if self.frozen:
            raise RuntimeError("grid is frozen")
        value = torch.as_tensor(value, dtype=self.dtype)
        if tuple(value.shape) != (self.tokens, self.dim):
            raise ValueError(f"cell shape must be {(self.tokens, self.dim)}, got {tuple(value.shape)}")
        with torch.no_grad():
            self.slots[self.slot_of(row, group)].copy_(value)

    def cells_at(self, t: int) -> dict[LayerGroup, torch.Tensor]:
        """Cells for the row labelled with timestep ``t``."""
        row = self.row_of(t)
        return {g: self.cell(row, g) for g in GROUPS}

    def slots_for(self, cells: Iterable[tuple[int, LayerGroup]]) -> list[int]:
        return sorted({self.slot_of(r, g) for r, g in cells})

    def cells_of_slot(self, slot: int) -> list[tuple[int, LayerGroup]]:
        rows, cols = np.nonzero(self.layout == slot)
        return [(int(r), GROUPS[c]) for r, c in zip(rows, cols)]

    def writable_slots(self, cells: Iterable[tuple[int, LayerGroup]],
                       mask: Collection[tuple[int, LayerGroup]]) -> list[int]:
        """Slots behind ``cells`` whose every backing cell lies in ``mask``.

        Writing a shared slot changes all cells it backs, so a slot that also
        backs an unselected cell must stay fixed.
        """
        return [k for k in self.slots_for(cells) if all(c in mask for c in self.cells_of_slot(k))]

    def materialize(self) -> torch.Tensor:
        """All cells as a (T, G, tokens, dim) tensor."""
        return self.slots[torch.from_numpy(self.layout)].clone()

    def freeze(self) -> "PromptGrid":
        self.frozen = True
        return self

    def copy(self) -> "PromptGrid":
        return PromptGrid(self.slots.detach().clone(), self.layout.copy(), self.sharing_mode,
                          self._snapshot, self.timesteps)

    def __repr__(self) -> str:
        return (f"PromptGrid(T={self.T}, mode={self.sharing_mode.value}, tokens={self.tokens}, "
                f"dim={self.dim}, slots={self.slots.shape[0]})")


def init_grid(source_embedding: torch.Tensor, T: int, mode: SharingMode = SharingMode.P_STAR,
              timesteps: Sequence[int] | None = None) -> PromptGrid:
    """Grid whose every cell starts equal to ``source_embedding``."""
    source_embedding = torch.as_tensor(source_embedding)
    if not torch.isfinite(source_embedding).all():
        raise ValueError("source embedding contains non-finite values")
    if T < 1:
        raise ValueError("T must be >= 1")
    if source_embedding.ndim != 2:
        raise ValueError("embedding must have shape (tokens, dim)")
    layout = slot_layout(T, mode)
    n_slots = int(layout.max()) + 1
    slots = source_embedding.detach().clone().unsqueeze(0).repeat(n_slots, 1, 1)
    snapshot = source_embedding.detach().clone().expand(T, len(GROUPS), *source_embedding.shape)
    return PromptGrid(slots, layout, mode, snapshot.contiguous(), timesteps)


def selection_mask(edit_class: EditClass, T: int, reverse: bool = False) -> frozenset[tuple[int, LayerGroup]]:
    """Cells the optimizer may touch: the groups irrelevant to the edit.

    ``reverse`` swaps the structure and appearance cases (a diagnostic variant).
    """
    edit_class = EditClass(edit_class)
    if reverse and edit_class is not EditClass.GLOBAL_EDIT:
        edit_class = (EditClass.APPEARANCE_EDIT if edit_class is EditClass.STRUCTURE_EDIT
                      else EditClass.STRUCTURE_EDIT)
    if edit_class is EditClass.STRUCTURE_EDIT:
        groups = (LayerGroup.APPEARANCE,)
    elif edit_class is EditClass.APPEARANCE_EDIT:
        groups = (LayerGroup.STRUCTURE,)
    else:
        groups = GROUPS
    return frozenset((t, g) for t in range(T) for g in groups)


EDIT_TYPES: dict[str, EditClass] = {
    "add object": EditClass.STRUCTURE_EDIT,
    "delete object": EditClass.STRUCTURE_EDIT,
    "change object": EditClass.STRUCTURE_EDIT,
    "change content": EditClass.STRUCTURE_EDIT,
    "change pose": EditClass.STRUCTURE_EDIT,
    "change color": EditClass.APPEARANCE_EDIT,
    "change material": EditClass.APPEARANCE_EDIT,
    "change style": EditClass.APPEARANCE_EDIT,
    "change background": EditClass.GLOBAL_EDIT,
}

# benchmark spellings
_ALIASES = {
    "change attribute content": "change content",
    "change attribute pose": "change pose",
    "change attribute color": "change color",
    "change attribute material": "change material",
}


def _normalize_label(label: str) -> str:
    return " ".join(label.lower().replace("_", " ").replace("-", " ").split())


def register_edit_alias(alias: str, label: str) -> None:
    label = _normalize_label(label)
    if label not in EDIT_TYPES:
        raise ValueError(f"cannot alias to unknown edit type {label!r}")
    _ALIASES[_normalize_label(alias)] = label


def classify_edit(edit_type_label: str, multi_edit: bool = False) -> EditClass:
    label = _normalize_label(edit_type_label)
    label = _ALIASES.get(label, label)
    if label not in EDIT_TYPES:
        valid = ", ".join(sorted(EDIT_TYPES))
        raise ValueError(f"unknown edit type {edit_type_label!r}; valid types: {valid}")
    if multi_edit:
        return EditClass.GLOBAL_EDIT
    return EDIT_TYPES[label]


def renew_target(grid_opt: PromptGrid, target_embedding: torch.Tensor) -> PromptGrid:
    """Move the optimization offset of every cell onto a target embedding.

    Each output cell is ``optimized + (target - source)``; written this way so a
    target equal to the source returns the optimized cells bit-for-bit.
    """
    target_embedding = torch.as_tensor(target_embedding, dtype=grid_opt.dtype)
    if tuple(target_embedding.shape) != (grid_opt.tokens, grid_opt.dim):
        raise ValueError(f"target embedding shape {tuple(target_embedding.shape)} does not match "
                         f"grid cells {(grid_opt.tokens, grid_opt.dim)}")
    with torch.no_grad():
        cells = grid_opt.materialize()
        renewed = cells + (target_embedding - grid_opt._snapshot)
    T, G = renewed.shape[:2]
    layout = slot_layout(T, SharingMode.P_STAR, G)
    return PromptGrid(renewed.reshape(T * G, grid_opt.tokens, grid_opt.dim).contiguous(), layout,
                      SharingMode.P_STAR, grid_opt._snapshot, grid_opt.timesteps)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

GRID_MAGIC = b"TDGR"
GRID_VERSION = 1
_DTYPE_CODES = {torch.float32: 4, torch.float64: 8}
_HEADER = struct.Struct("<4sIIIIIII")  # magic, version, T, groups, tokens, dim, mode, dtype bytes


def save_grid(grid: PromptGrid, path: str | Path) -> None:
    """Header, then row-major cells, then the snapshot, then timestep labels."""
    code = _DTYPE_CODES[grid.dtype]
    np_dtype = np.dtype("<f4") if code == 4 else np.dtype("<f8")
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, grid.T, len(GROUPS), grid.tokens, grid.dim,
                          _MODE_CODES[grid.sharing_mode], code)
    cells = grid.materialize().detach().numpy().astype(np_dtype)
    snap = grid._snapshot.detach().numpy().astype(np_dtype)
    labels = np.asarray(grid.timesteps, dtype="<i8")
    Path(path).write_bytes(header + cells.tobytes() + snap.tobytes() + labels.tobytes())


def load_grid(path: str | Path) -> PromptGrid:
    raw = Path(path).read_bytes()
    magic, version, T, G, tokens, dim, mode_code, code = _HEADER.unpack_from(raw, 0)
    if magic != GRID_MAGIC:
        raise ValueError(f"{path}: not a prompt-grid file")
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported grid version {version}")
    mode = {v: k for k, v in _MODE_CODES.items()}[mode_code]
    np_dtype = np.dtype("<f4") if code == 4 else np.dtype("<f8")
    n = T * G * tokens * dim
    off = _HEADER.size
    cells = np.frombuffer(raw, np_dtype, n, off).reshape(T, G, tokens, dim)
    off += n * np_dtype.itemsize
    snap = np.frombuffer(raw, np_dtype, n, off).reshape(T, G, tokens, dim)
    off += n * np_dtype.itemsize
    labels = np.frombuffer(raw, "<i8", T, off)
    layout = slot_layout(T, mode, G)
    n_slots = int(layout.max()) + 1
    slots = np.empty((n_slots, tokens, dim), dtype=np_dtype)
    for r in range(T):
        for g in range(G):
            slots[layout[r, g]] = cells[r, g]
    torch_dtype = torch.float32 if code == 4 else torch.float64
    return PromptGrid(torch.from_numpy(slots.astype(np_dtype.newbyteorder("="))).to(torch_dtype),
                      layout, mode, torch.from_numpy(snap.copy()).to(torch_dtype), labels.tolist())
