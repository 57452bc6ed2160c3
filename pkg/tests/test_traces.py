import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abrkit.traces import (
    CorpusEntry,
    CorpusManifest,
    DurationTooShort,
    IoFailure,
    MalformedLine,
    NegativeBandwidth,
    NonMonotonicTime,
    ThroughputTrace,
    TooFewSamples,
    TraceArchetype,
    load_trace,
    materialize_corpus,
    resample_1hz,
    save_trace,
    synthesize_trace,
)


def write(tmp_path, text, name="t.txt"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadTrace:
    def test_two_line_file(self, tmp_path):
        trace = load_trace(write(tmp_path, "0 1.0\n1 2.0\n"))
        assert trace.samples == ((0.0, 1.0), (1.0, 2.0))

    def test_duplicate_timestamp(self, tmp_path):
        with pytest.raises(NonMonotonicTime):
            load_trace(write(tmp_path, "0 1.0\n0 2.0\n"))

    def test_negative_bandwidth(self, tmp_path):
        with pytest.raises(NegativeBandwidth):
            load_trace(write(tmp_path, "0 -1.0\n"))

    def test_malformed_line_carries_line_number(self, tmp_path):
        with pytest.raises(MalformedLine) as err:
            load_trace(write(tmp_path, "0 1.0\n1 2.0\nbogus\n"))
        assert err.value.line_number == 3

    def test_non_numeric_field(self, tmp_path):
        with pytest.raises(MalformedLine):
            load_trace(write(tmp_path, "0 x\n1 2\n"))

    def test_too_few_samples(self, tmp_path):
        with pytest.raises(TooFewSamples):
            load_trace(write(tmp_path, "0 1.0\n"))

    def test_negative_start_time(self, tmp_path):
        with pytest.raises(NonMonotonicTime):
            load_trace(write(tmp_path, "-1 1.0\n0 1.0\n"))


class TestSaveTrace:
    def test_round_trip(self, tmp_path):
        trace = ThroughputTrace("x", ((0.0, 1.0), (1.5, 2.25), (3.0, 0.5)))
        path = tmp_path / "x.txt"
        save_trace(trace, path)
        again = load_trace(path)
        assert again.samples == trace.samples

    def test_six_decimal_quantization(self, tmp_path):
        trace = ThroughputTrace("x", ((0.0, 1.23456789), (1.0, 2.0)))
        path = tmp_path / "x.txt"
        save_trace(trace, path)
        assert path.read_text().splitlines()[0] == "0.000000 1.234568"

    def test_unwritable_path(self, tmp_path):
        trace = ThroughputTrace("x", ((0.0, 1.0), (1.0, 2.0)))
        with pytest.raises(IoFailure):
            save_trace(trace, tmp_path / "no" / "such" / "dir" / "x.txt")

    def test_load_save_identity_on_quantized(self, tmp_path):
        trace = ThroughputTrace("x", ((0.0, 1.234568), (1.0, 2.0)))
        p1 = tmp_path / "a.txt"
        p2 = tmp_path / "b.txt"
        save_trace(trace, p1)
        save_trace(load_trace(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestResample:
    def test_hold_between_samples(self):
        trace = ThroughputTrace("x", ((0.0, 2.0), (1.0, 4.0)))
        assert resample_1hz(trace).values.tolist() == [2.0, 4.0]

    def test_time_weighted_mean(self):
        trace = ThroughputTrace("x", ((0.0, 2.0), (0.5, 4.0), (1.0, 4.0)))
        assert resample_1hz(trace).values.tolist() == [3.0]

    def test_constant_preserved(self):
        trace = ThroughputTrace("x", tuple((float(t), 5.5) for t in range(10)))
        assert np.allclose(resample_1hz(trace).values, 5.5)

    def test_output_length_is_floor_duration(self):
        trace = ThroughputTrace("x", ((0.0, 1.0), (2.5, 2.0), (3.2, 3.0)))
        # duration = 3.2 + (3.2 - 2.5) = 3.9 -> 3 full bins
        assert len(resample_1hz(trace)) == int(np.floor(trace.duration)) == 3

    def test_values_within_sample_range(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            times = np.cumsum(rng.uniform(0.2, 2.0, size=12))
            bws = rng.uniform(0.0, 8.0, size=12)
            trace = ThroughputTrace("x", tuple(zip(times.tolist(), bws.tolist())))
            values = resample_1hz(trace).values
            assert values.min() >= bws.min() - 1e-9
            assert values.max() <= bws.max() + 1e-9


class TestSynthesize:
    def test_zero_noise_stable(self):
        arch = TraceArchetype("StableHigh", mean=4.0, noise_std=0.0, seed=7)
        trace = synthesize_trace(arch, 100)
        assert all(bw == 4.0 for _, bw in trace.samples)
        assert len(trace.samples) == 100

    def test_deterministic_by_seed(self):
        arch = TraceArchetype("Bursty", mean=2.0, amplitude=1.0, period=5, noise_std=0.3, seed=13)
        assert synthesize_trace(arch, 120).samples == synthesize_trace(arch, 120).samples

    def test_sawtooth_extrema(self):
        arch = TraceArchetype("Sawtooth", mean=2.0, amplitude=1.0, period=20, seed=0)
        trace = synthesize_trace(arch, 80)
        bws = [bw for _, bw in trace.samples[:20]]
        assert min(bws) == pytest.approx(1.0)
        assert max(bws) == pytest.approx(3.0)

    def test_duration_too_short(self):
        with pytest.raises(DurationTooShort):
            synthesize_trace(TraceArchetype("StableLow", mean=1.0), 59)

    def test_bandwidth_floor(self):
        arch = TraceArchetype("Bursty", mean=0.2, amplitude=5.0, period=3, noise_std=1.0, seed=3)
        trace = synthesize_trace(arch, 100)
        assert min(bw for _, bw in trace.samples) >= 0.01

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_purity(self, seed):
        arch = TraceArchetype("Ramp", mean=2.0, amplitude=1.0, noise_std=0.2, seed=seed)
        assert synthesize_trace(arch, 90).samples == synthesize_trace(arch, 90).samples


class TestCorpusManifest:
    def test_json_round_trip(self):
        manifest = CorpusManifest(
            entries=[
                CorpusEntry("a", TraceArchetype("StableHigh", mean=3.0, seed=1), 120),
                CorpusEntry("b", TraceArchetype("Sawtooth", mean=2.0, amplitude=1.0, period=10, seed=2), 100),
            ],
            train_ids=["a"],
            test_ids=["b"],
        )
        again = CorpusManifest.from_json(manifest.to_json())
        assert again.to_json() == manifest.to_json()

    def test_materialize_matches_direct_synthesis(self):
        arch = TraceArchetype("StableLow", mean=0.8, noise_std=0.1, seed=5)
        manifest = CorpusManifest(entries=[CorpusEntry("t0", arch, 90)])
        [trace] = materialize_corpus(manifest)
        assert trace.samples == synthesize_trace(arch, 90, trace_id="t0").samples
