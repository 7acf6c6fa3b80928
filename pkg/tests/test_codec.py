import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msras.codec import (
    END_TOKEN, NUM_CLASSES, FramePosteriors, MessageError, MessageFrames, capacity_chars_per_second,
    decode_frames, encode_text, frame_accuracy, random_indices,
)


def onehot(k):
    row = np.zeros(NUM_CLASSES)
    row[k] = 1
    return row


def test_encode_maps_letters_and_pads_with_end_tokens():
    m = encode_text("ab", 4)
    np.testing.assert_array_equal(m.frames, np.stack([onehot(0), onehot(1), onehot(26), onehot(26)]))
    np.testing.assert_array_equal(encode_text("", 3).indices, [END_TOKEN] * 3)


@pytest.mark.parametrize("text, frames", [("abc", 3), ("hello", 2)])
def test_encode_rejects_messages_without_room_for_end_token(text, frames):
    with pytest.raises(MessageError):
        encode_text(text, frames)


@pytest.mark.parametrize("text", ["Ab", "a b", "a1", "é"])
def test_encode_rejects_illegal_characters(text):
    with pytest.raises(MessageError):
        encode_text(text, 10)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet="abcdefghijklmnopqrstuvwxyz", max_size=40), st.integers(1, 10))
def test_roundtrip(text, spare):
    m = encode_text(text, len(text) + spare)
    assert decode_frames(m.as_posteriors()) == text
    assert frame_accuracy(m, m.as_posteriors()) == 100.0


def test_decode_examples():
    assert decode_frames(encode_text("cat", 4)) == "cat"
    assert decode_frames(encode_text("zz", 5).as_posteriors()) == "zz"
    uniform = FramePosteriors(np.full((6, NUM_CLASSES), 1 / NUM_CLASSES))
    assert decode_frames(uniform) == "aaaaaa"


def test_decode_stops_at_first_end_token():
    idx = [2, 0, END_TOKEN, 19]
    assert decode_frames(MessageFrames.from_indices(idx, 1024)) == "ca"


def test_posteriors_validate_simplex():
    with pytest.raises(MessageError):
        FramePosteriors(np.full((2, NUM_CLASSES), 0.5))
    with pytest.raises(MessageError):
        FramePosteriors(np.ones((2, 5)) / 5)


def test_frame_accuracy_examples():
    truth = MessageFrames.from_indices([0] * 8, 256)
    wrong = MessageFrames.from_indices([1] * 8, 256).as_posteriors()
    assert frame_accuracy(truth, wrong) == 0.0
    with pytest.raises(MessageError):
        frame_accuracy(truth, MessageFrames.from_indices([0] * 7, 256))


def test_random_guessing_is_about_one_in_27(rng):
    truth = MessageFrames.from_indices(rng.integers(0, NUM_CLASSES, 200_000), 256)
    post = rng.dirichlet(np.ones(NUM_CLASSES), size=200_000)
    assert frame_accuracy(truth, FramePosteriors(post)) == pytest.approx(100 / 27, abs=0.25)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_accuracy_invariant_to_argmax_preserving_transforms(seed):
    rng = np.random.default_rng(seed)
    truth = MessageFrames.from_indices(rng.integers(0, NUM_CLASSES, 30), 256)
    logits = rng.standard_normal((30, NUM_CLASSES))
    p1 = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    sharpened = p1 ** 3 / (p1 ** 3).sum(1, keepdims=True)
    assert frame_accuracy(truth, FramePosteriors(p1)) == frame_accuracy(truth, FramePosteriors(sharpened))


def test_capacity():
    assert capacity_chars_per_second(44100, 1024) == pytest.approx(43.07, abs=0.01)
    assert capacity_chars_per_second(8000, 256) == 31.25
    assert capacity_chars_per_second(44100, 44100) == 1.0
    # 1024 samples at 44.1 kHz is the 23.2 ms frame period
    assert 1024 / 44100 * 1000 == pytest.approx(23.2, abs=0.05)


def test_random_indices_shapes_and_end_tokens(rng):
    idx = random_indices(rng, 5, 10)
    assert idx.shape == (5, 10)
    assert np.all(idx[:, -1] == END_TOKEN)
    full = random_indices(rng, 5, 10, full=True)
    assert np.all(full[:, :-1] < END_TOKEN) and np.all(full[:, -1] == END_TOKEN)
