import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drumscribe.events import (
    ComponentMap, EventError, Grid, GM_PITCHES, MAP_7_TO_3, MAP_7_TO_5,
    IDENTITY_MAP, MidiParseError, Note, NoteList, grid_from_notes, midi_export,
    midi_import, notes_from_grid, remap, velocity_from_model, velocity_to_model,
)


def test_empty_notes_gives_all_minus_one():
    grid = grid_from_notes(NoteList(), 100.0, 50, 7)
    assert np.all(grid.values == -1.0)


def test_max_velocity_note_hits_plus_one():
    grid = grid_from_notes(NoteList([Note(0.0, 0, 127)]), 100.0, 10, 7)
    assert grid.values[0, 0, 0] == 1.0
    assert grid.values[0, 0, 1] == 1.0


def test_rounding_and_velocity_encoding():
    # t=0.105s at 100 Hz is the half case; round half up lands on frame 11
    frame = 11
    grid = grid_from_notes(NoteList([Note(0.105, 2, 64)]), 100.0, 20, 7)
    assert grid.values[frame, 2, 0] == 1.0
    assert grid.values[frame, 2, 1] == pytest.approx(2 * 64 / 127 - 1)


def test_out_of_range_time_rejected():
    with pytest.raises(EventError, match="frame"):
        grid_from_notes(NoteList([Note(1.0, 0, 100)]), 100.0, 50, 7)


def test_collision_keeps_louder_hit():
    notes = NoteList([Note(0.0, 0, 50), Note(0.004, 0, 90)])
    grid = grid_from_notes(notes, 100.0, 10, 7)
    decoded = notes_from_grid(grid)
    assert len(decoded) == 1
    assert decoded.entries[0].velocity == 90


def test_all_minus_one_decodes_empty():
    grid = Grid(np.full((30, 7, 2), -1.0))
    assert len(notes_from_grid(grid)) == 0


def test_decode_velocity_arithmetic():
    values = np.full((10, 7, 2), -1.0)
    values[3, 1, 0] = 0.2
    values[3, 1, 1] = 0.5
    decoded = notes_from_grid(Grid(values))
    assert decoded.entries == [Note(0.03, 1, round(127 * 0.75))]
    assert decoded.entries[0].velocity == 95


def test_nan_grid_rejected():
    values = np.full((5, 7, 2), -1.0)
    values[0, 0, 0] = np.nan
    with pytest.raises(EventError):
        notes_from_grid(Grid(values))


def test_velocity_normalization_invertible_at_integers():
    for v in range(128):
        assert velocity_from_model(velocity_to_model(v)) == v


@st.composite
def collision_free_notelists(draw):
    n_frames = 100
    cells = draw(st.sets(st.tuples(st.integers(0, n_frames - 1), st.integers(0, 6)),
                         max_size=30))
    notes = [Note(frame / 100.0, comp, draw(st.integers(0, 127)))
             for frame, comp in cells]
    return NoteList(notes)


@settings(max_examples=1000, deadline=None)
@given(collision_free_notelists())
def test_grid_round_trip_property(notes):
    grid = grid_from_notes(notes, 100.0, 100, 7)
    assert notes_from_grid(grid) == notes


class TestRemap:
    def test_identity(self):
        notes = NoteList([Note(0.1, 0, 90), Note(0.2, 5, 70)])
        assert remap(notes, IDENTITY_MAP) == notes

    def test_7_to_3_table(self):
        notes = NoteList([Note(0.0, 0, 90), Note(0.0, 5, 70)])  # kick + ride
        mapped = remap(notes, MAP_7_TO_3)
        assert [(n.component, n.velocity) for n in mapped] == [(0, 90), (2, 70)]

    def test_merge_keeps_max_velocity(self):
        notes = NoteList([Note(0.5, 4, 50), Note(0.5, 5, 90)])  # crash + ride
        mapped = remap(notes, MAP_7_TO_5)
        assert mapped.entries == [Note(0.5, 4, 90)]

    def test_drop_component(self):
        cmap = ComponentMap({0: 0, 1: None, 2: None, 3: None, 4: None, 5: None, 6: None})
        notes = NoteList([Note(0.0, 0, 90), Note(0.1, 3, 70)])
        assert remap(notes, cmap).entries == [Note(0.0, 0, 90)]

    def test_non_contiguous_targets_rejected(self):
        with pytest.raises(EventError):
            ComponentMap({0: 0, 1: 2})


class TestMidi:
    def test_round_trip_identity(self):
        notes = NoteList([Note(0.0, 0, 100), Note(0.25, 1, 64), Note(1.5, 6, 127)])
        decoded = midi_import(midi_export(notes))
        assert len(decoded) == len(notes)
        for a, b in zip(notes, decoded):
            assert b.component == a.component
            assert b.velocity == a.velocity
            assert abs(b.time - a.time) <= 1.0 / 960.0  # one tick at 480 PPQ, 120 BPM

    def test_empty_list_valid_smf(self):
        data = midi_export(NoteList())
        assert data[:4] == b"MThd"
        assert midi_import(data) == NoteList()

    def test_kick_tick_arithmetic(self):
        # 480 PPQ at 120 BPM = 960 ticks/s, so t=1.0s lands on tick 960
        data = midi_export(NoteList([Note(1.0, 0, 100)]))
        decoded = midi_import(data)
        assert decoded.entries == [Note(960 / 960.0, 0, 100)]
        assert bytes([0x99, GM_PITCHES[0], 100]) in data

    def test_malformed_header(self):
        with pytest.raises(MidiParseError) as err:
            midi_import(b"XXXX" + b"\x00" * 20)
        assert err.value.offset == 0

    def test_truncated_track(self):
        data = midi_export(NoteList([Note(0.0, 0, 100)]))
        with pytest.raises(MidiParseError):
            midi_import(data[:-6])

    @given(st.lists(st.tuples(st.integers(0, 400), st.integers(0, 6),
                              st.integers(0, 127)), max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_round_trip_quantization_bound(self, triples):
        notes = NoteList([Note(f / 100.0, c, v) for f, c, v in
                          {(f, c): (f, c, v) for f, c, v in triples}.values()])
        decoded = midi_import(midi_export(notes))
        assert len(decoded) == len(notes)
        for a, b in zip(notes, decoded):
            assert abs(a.time - b.time) <= 1.0 / 960.0


def test_notelist_text_round_trip():
    notes = NoteList([Note(0.12, 3, 88), Note(1.0, 0, 127)])
    assert NoteList.from_text(notes.to_text()) == notes
