import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from todinv.embedding_space import (EDIT_TYPES, GROUPS, EditClass, LayerGroup, SharingMode, classify_edit,
                                    encode_prompt, group_for_resolution, init_grid, load_grid,
                                    register_edit_alias, renew_target, save_grid, selection_mask, slot_layout,
                                    tokenize)

APP, STR = LayerGroup.APPEARANCE, LayerGroup.STRUCTURE


def test_slot_counts():
    T = 5
    assert slot_layout(T, SharingMode.P).max() == 0
    assert slot_layout(T, SharingMode.P_T).max() + 1 == T
    assert slot_layout(T, SharingMode.P_PLUS).max() + 1 == 2
    assert len(np.unique(slot_layout(T, SharingMode.P_STAR))) == 2 * T


@pytest.mark.parametrize("mode", list(SharingMode))
def test_writes_propagate_through_shared_slots(mode):
    g = init_grid(encode_prompt("a red square"), 4, mode)
    g.set_cell(2, STR, torch.ones(8, 64, dtype=torch.float64))
    changed = {(r, grp) for r in range(4) for grp in GROUPS if torch.equal(g.cell(r, grp), torch.ones(8, 64,
                                                                                                  dtype=torch.float64))}
    expected = {
        SharingMode.P: {(r, grp) for r in range(4) for grp in GROUPS},
        SharingMode.P_T: {(2, APP), (2, STR)},
        SharingMode.P_PLUS: {(r, STR) for r in range(4)},
        SharingMode.P_STAR: {(2, STR)},
    }[mode]
    assert changed == expected
    # the snapshot never moves
    assert torch.equal(g.snapshot_cell(2, STR), encode_prompt("a red square"))


def test_frozen_grid_rejects_writes():
    g = init_grid(encode_prompt("x"), 2).freeze()
    with pytest.raises(RuntimeError):
        g.set_cell(0, APP, torch.zeros(8, 64, dtype=torch.float64))


def test_rows_labelled_by_timestep():
    g = init_grid(encode_prompt("x"), 3, timesteps=[0, 20, 40])
    assert g.row_of(20) == 1
    with pytest.raises(KeyError):
        g.row_of(10)


def test_init_grid_validation():
    with pytest.raises(ValueError):
        init_grid(torch.full((8, 64), float("nan")), 2)
    with pytest.raises(ValueError):
        init_grid(torch.zeros(64), 2)
    with pytest.raises(ValueError):
        init_grid(torch.zeros(8, 64), 0)


def test_encode_prompt_deterministic():
    a = encode_prompt("A red square!")
    b = encode_prompt("a red   square")
    assert torch.equal(a, b)
    assert a.shape == (8, 64)
    assert not torch.equal(a, encode_prompt("a blue square"))
    assert tokenize("Add a cat, please") == ["add", "a", "cat", "please"]


def test_resolution_groups():
    assert group_for_resolution(64) is APP and group_for_resolution(8) is STR
    with pytest.raises(ValueError):
        group_for_resolution(128)


@pytest.mark.parametrize("edit_class,groups", [
    (EditClass.STRUCTURE_EDIT, {APP}),
    (EditClass.APPEARANCE_EDIT, {STR}),
    (EditClass.GLOBAL_EDIT, {APP, STR}),
])
def test_selection_mask(edit_class, groups):
    m = selection_mask(edit_class, 6)
    assert m == {(t, g) for t in range(6) for g in groups}


def test_selection_mask_reverse():
    assert selection_mask(EditClass.STRUCTURE_EDIT, 3, reverse=True) == selection_mask(EditClass.APPEARANCE_EDIT, 3)
    assert selection_mask(EditClass.GLOBAL_EDIT, 3, reverse=True) == selection_mask(EditClass.GLOBAL_EDIT, 3)


def test_nine_edit_types_cover_three_classes():
    assert len(EDIT_TYPES) == 9
    assert set(EDIT_TYPES.values()) == set(EditClass)
    assert classify_edit("Change_Color") is EditClass.APPEARANCE_EDIT
    assert classify_edit("change attribute pose") is EditClass.STRUCTURE_EDIT
    assert classify_edit("change color", multi_edit=True) is EditClass.GLOBAL_EDIT


def test_unknown_edit_type_lists_valid_types():
    with pytest.raises(ValueError) as e:
        classify_edit("teleport")
    msg = str(e.value)
    assert "teleport" in msg and all(t in msg for t in EDIT_TYPES)


def test_register_alias():
    register_edit_alias("recolour", "change color")
    assert classify_edit("recolour") is EditClass.APPEARANCE_EDIT
    with pytest.raises(ValueError):
        register_edit_alias("x", "teleport")


def test_writable_slots_respect_sharing():
    mask = selection_mask(EditClass.APPEARANCE_EDIT, 3)
    cells = [(1, STR)]
    assert init_grid(encode_prompt("x"), 3, SharingMode.P_STAR).writable_slots(cells, mask) == [3]
    # a row slot also backs the appearance cell, so it must stay fixed
    assert init_grid(encode_prompt("x"), 3, SharingMode.P_T).writable_slots(cells, mask) == []
    assert init_grid(encode_prompt("x"), 3, SharingMode.P_PLUS).writable_slots(cells, mask) == [1]
    assert init_grid(encode_prompt("x"), 3, SharingMode.P).writable_slots(cells, mask) == []


def test_renewal_identity_is_bit_exact():
    src = encode_prompt("a red square")
    g = init_grid(src, 4)
    gen = torch.Generator().manual_seed(0)
    for r in range(4):
        g.set_cell(r, APP, src + 1e-3 * torch.randn(src.shape, generator=gen, dtype=torch.float64))
    renewed = renew_target(g, src)
    assert torch.equal(renewed.materialize(), g.materialize())


def test_renewal_moves_offset_onto_target():
    src, tgt = encode_prompt("a red square"), encode_prompt("a blue square")
    g = init_grid(src, 2, SharingMode.P)
    g.set_cell(0, APP, src + 0.5)
    renewed = renew_target(g, tgt)
    assert renewed.sharing_mode is SharingMode.P_STAR
    torch.testing.assert_close(renewed.cell(1, STR), tgt + 0.5)
    with pytest.raises(ValueError):
        renew_target(g, torch.zeros(4, 64))


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
@pytest.mark.parametrize("mode", list(SharingMode))
def test_grid_file_round_trip(tmp_path, dtype, mode):
    g = init_grid(encode_prompt("a red square", dtype=dtype), 3, mode, timesteps=[0, 333, 666])
    g.set_cell(1, STR, torch.full((8, 64), 0.25, dtype=dtype))
    save_grid(g, tmp_path / "g.bin")
    h = load_grid(tmp_path / "g.bin")
    assert h.sharing_mode is mode and h.timesteps == (0, 333, 666) and h.dtype == dtype
    assert torch.equal(h.materialize(), g.materialize())
    assert torch.equal(h.source_snapshot, g.source_snapshot)
    assert (tmp_path / "g.bin").read_bytes()[:4] == b"TDGR"


def test_grid_file_bad_magic(tmp_path):
    (tmp_path / "g.bin").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(ValueError, match="not a prompt-grid"):
        load_grid(tmp_path / "g.bin")


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 20), mode=st.sampled_from(list(SharingMode)), row=st.data())
def test_materialize_matches_cells(T, mode, row):
    g = init_grid(encode_prompt("x"), T, mode)
    r = row.draw(st.integers(0, T - 1))
    grp = row.draw(st.sampled_from(GROUPS))
    g.set_cell(r, grp, torch.full((8, 64), 2.0, dtype=torch.float64))
    full = g.materialize()
    for rr in range(T):
        for gi, gg in enumerate(GROUPS):
            assert torch.equal(full[rr, gi], g.cell(rr, gg))
