import json
import math

import numpy as np

from dystonia_bayes.pipeline import build_model
from dystonia_bayes.reporting import (
    density_csv,
    dumps,
    format_float,
    model_digest,
    read_trace_csv,
    write_traces,
)
from dystonia_bayes.sampler import SamplerConfig, run_chains
from dystonia_bayes.trial_data import FINAL_SPEC, FULL_SPEC


def test_float_format_round_trips():
    for x in (0.1, 1 / 3, -2.394, 1e-300, 12345678.9):
        assert float(format_float(x)) == x


def test_dumps_handles_numpy_and_non_finite():
    text = dumps({"a": np.float64(0.5), "b": [np.int64(2), math.nan], "c": np.array([1.0, math.inf]),
                  "d": True, "e": None})
    assert json.loads(text) == {"a": 0.5, "b": [2, None], "c": [1.0, None], "d": True, "e": None}


def test_digest_depends_on_spec_and_prior(small_panel):
    a = model_digest(build_model(small_panel, FINAL_SPEC))
    assert a == model_digest(build_model(small_panel, FINAL_SPEC))
    assert a != model_digest(build_model(small_panel, FULL_SPEC))


def test_trace_files_round_trip(tmp_path, small_model):
    cfg = SamplerConfig(seed=1, chains=2, iterations=100, burn_in=10)
    trace = run_chains(small_model, cfg)
    paths = write_traces(tmp_path, trace, small_model, cfg)
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["trace_1.csv", "trace_2.csv"]
    header, values = read_trace_csv(paths[1])
    idx = [trace.index(h) for h in header]
    np.testing.assert_array_equal(values, trace.draws[1][:, idx])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["schema"] == 1 and manifest["seed"] == 1
    assert manifest["columns"] == list(header)


def test_density_csv():
    text = density_csv([0.0, 1.0], [0.5, 0.25])
    assert text == "grid,density\n0,0.5\n1,0.25\n"
