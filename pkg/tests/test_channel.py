import numpy as np
import pytest

from hbflearn.channel import (ChannelBatch, ChannelModelParams, add_pilot_noise,
                              generate_batch, generate_channel, read_dataset,
                              steering_vector, write_dataset)
from hbflearn.errors import FormatError, ParameterError


class TestChannelModel:
    def test_broadside_steering_is_all_ones(self):
        assert np.allclose(steering_vector(0.0, 8), np.ones(8))

    def test_steering_phase_progression(self):
        phi = 0.4
        a = steering_vector(phi, 6)
        assert np.allclose(np.angle(a[1] / a[0]), np.pi * np.sin(phi))
        assert np.allclose(np.abs(a), 1.0)

    def test_norm_statistics(self):
        # E[||h_u||^2] = N_T, checked over 10^4 rows
        params = ChannelModelParams(seed=77)
        batch = generate_batch(params, 16, 2, 5000)
        mean_norm = np.mean(np.sum(np.abs(batch.h) ** 2, axis=2))
        assert abs(mean_norm - 16.0) < 0.05 * 16.0

    def test_determinism(self):
        params = ChannelModelParams(seed=5)
        h1 = generate_channel(params, 8, 2, sample_index=3)
        h2 = generate_channel(params, 8, 2, sample_index=3)
        assert np.array_equal(h1, h2)
        h3 = generate_channel(params, 8, 2, sample_index=4)
        assert not np.array_equal(h1, h3)

    def test_generation_independent_of_batching(self):
        params = ChannelModelParams(seed=9)
        whole = generate_batch(params, 4, 2, 6).h
        single = generate_channel(params, 4, 2, sample_index=4)
        assert np.array_equal(whole[4], single)

    def test_invalid_params(self):
        with pytest.raises(ParameterError):
            ChannelModelParams(n_clusters=0).validate()
        with pytest.raises(ParameterError):
            ChannelModelParams(angle_spread_deg=0.0).validate()
        with pytest.raises(ParameterError):
            generate_batch(ChannelModelParams(), 4, 2, 0)


class TestPilotNoise:
    def test_zero_power_is_exact_conjugate_transpose(self, rng):
        h = rng.standard_normal((3, 6)) + 1j * rng.standard_normal((3, 6))
        h_hat = add_pilot_noise(h, 0.0, seed=1)
        assert np.array_equal(h_hat, np.conj(h.T))

    def test_noise_power_statistics(self, rng):
        p = 0.37
        h = rng.standard_normal((10000, 2, 4)) + 1j * rng.standard_normal((10000, 2, 4))
        h_hat = add_pilot_noise(h, p, seed=3)
        err = h_hat - np.conj(np.swapaxes(h, -1, -2))
        mean_power = np.mean(np.abs(err) ** 2)
        assert abs(mean_power - p) < 0.05 * p

    def test_seed_determinism(self, rng):
        h = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
        assert np.array_equal(add_pilot_noise(h, 0.5, seed=7),
                              add_pilot_noise(h, 0.5, seed=7))
        assert not np.array_equal(add_pilot_noise(h, 0.5, seed=7),
                                  add_pilot_noise(h, 0.5, seed=8))

    def test_negative_power_rejected(self, rng):
        h = rng.standard_normal((2, 4)) + 1j * rng.standard_normal((2, 4))
        with pytest.raises(ParameterError):
            add_pilot_noise(h, -0.1, seed=0)


class TestDatasetFile:
    def test_round_trip_at_f32_precision(self, tmp_path, rng):
        h = rng.standard_normal((100, 3, 8)) + 1j * rng.standard_normal((100, 3, 8))
        path = str(tmp_path / "ds.bin")
        write_dataset(path, ChannelBatch(h))
        back = read_dataset(path)
        expected = h.real.astype(np.float32).astype(np.float64) \
            + 1j * h.imag.astype(np.float32).astype(np.float64)
        assert np.array_equal(back.h, expected)

    def test_write_is_deterministic(self, tmp_path):
        batch = generate_batch(ChannelModelParams(seed=2), 4, 2, 10)
        p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
        write_dataset(p1, batch)
        write_dataset(p2, batch)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_corrupted_magic(self, tmp_path, rng):
        h = rng.standard_normal((2, 2, 4)) + 1j * rng.standard_normal((2, 2, 4))
        path = str(tmp_path / "ds.bin")
        write_dataset(path, ChannelBatch(h))
        raw = bytearray(open(path, "rb").read())
        raw[0:4] = b"XXXX"
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_truncated_file(self, tmp_path, rng):
        h = rng.standard_normal((4, 2, 4)) + 1j * rng.standard_normal((4, 2, 4))
        path = str(tmp_path / "ds.bin")
        write_dataset(path, ChannelBatch(h))
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-7])
        with pytest.raises(FormatError):
            read_dataset(path)

    def test_empty_write_rejected(self, tmp_path):
        with pytest.raises(ParameterError):
            write_dataset(str(tmp_path / "x.bin"),
                          ChannelBatch(np.zeros((0, 2, 4), dtype=np.complex128)))

    def test_bad_version(self, tmp_path, rng):
        h = rng.standard_normal((2, 2, 4)) + 1j * rng.standard_normal((2, 2, 4))
        path = str(tmp_path / "ds.bin")
        write_dataset(path, ChannelBatch(h))
        raw = bytearray(open(path, "rb").read())
        raw[4] = 99
        open(path, "wb").write(bytes(raw))
        with pytest.raises(FormatError):
            read_dataset(path)
