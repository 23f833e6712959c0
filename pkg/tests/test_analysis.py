import numpy as np
import pytest

from conftest import tiny_spec
from multiview_rssi import analysis as A
from multiview_rssi import models as M
from multiview_rssi import tensor as T

# Published table cells: (GFLOPs, MParams)
TABLE1 = {"sinvit_d": (1.26, 1.46), "sinvit_w": (2.10, 2.90), "mulvit_tf": (1.76, 1.72),
          "mulvit_twdnn": (1.66, 1.87)}
# Exact values from the layer-enumeration oracle below, frozen
EXACT = {"sinvit_d": (1_260_642_816, 1_457_441), "sinvit_w": (2_103_796_224, 2_899_649),
         "mulvit_tf": (1_760_742_912, 1_722_113), "mulvit_twdnn": (1_659_953_664, 1_870_337)}


def enumerate_params(spec):
    """Independent count: allocate the parameter set and sum sizes."""
    return M.num_params(M.init_params(spec))


class TestTable1:
    @pytest.mark.parametrize("name", list(TABLE1))
    def test_rounded_cells(self, name):
        r = A.cost_report(M.preset(name))
        assert (r.gflops, r.mparams) == TABLE1[name]

    @pytest.mark.parametrize("name", list(TABLE1))
    def test_exact_counts(self, name):
        assert (A.count_flops(M.preset(name)), A.count_params(M.preset(name))) == EXACT[name]

    @pytest.mark.parametrize("name", list(TABLE1))
    def test_params_match_allocation(self, name):
        assert A.count_params(M.preset(name)) == enumerate_params(M.preset(name))

    def test_summary_strings(self):
        assert A.cost_report(M.preset("sinvit_d")).summary() == "1.26 G / 1.46 M"
        assert A.cost_report(M.preset("mulvit_tf")).summary() == "1.76 G / 1.72 M"

    def test_table1_helper(self):
        assert {k: (v.gflops, v.mparams) for k, v in A.table1().items()} == TABLE1


class TestBreakdown:
    @pytest.mark.parametrize("name", list(TABLE1))
    def test_rows_sum_to_totals(self, name):
        r = A.cost_report(M.preset(name))
        assert sum(r.params_breakdown.values()) == r.params
        assert sum(r.flops_breakdown.values()) == r.flops

    def test_tf_compositionality(self):
        tf = A.cost_report(M.preset("mulvit_tf"))
        one = A.cost_report(M.preset("sinvit_d", depth=6))
        enc = sum(v for k, v in one.flops_breakdown.items() if k.startswith("enc0."))
        fusion = sum(v for k, v in tf.flops_breakdown.items() if k.startswith("fusion."))
        assert tf.flops == 2 * enc + fusion

    def test_convention_recorded(self):
        d = A.cost_report(M.preset("sinvit_d")).to_dict()
        assert "2 per multiply-accumulate" in d["convention"]

    def test_degenerate_spec_by_hand(self):
        spec = M.preset("sinvit_d", image_height=32, image_width=32, embed_dim=8, heads=2, depth=0,
                        head_hidden=1)
        e, pos, cls = 768 * 8 + 8, 5 * 8, 8
        head = 8 * 1 + 1 + 1 * 1 + 1
        assert A.count_params(spec) == e + pos + cls + head

    def test_pure_function_of_spec(self):
        spec = tiny_spec()
        assert A.cost_report(spec) == A.cost_report(M.ModelSpec.from_dict(spec.to_dict()))


@pytest.mark.parametrize("variant", ["mulvit_tf", "mulvit_twdnn", "sinvit_d", "sinvit_w"])
def test_instrumented_matmuls_equal_closed_form(variant):
    spec = tiny_spec(variant)
    p = M.init_params(spec)
    cfg = spec.encoders[0]
    x = np.zeros((2, 3, cfg.image_height, cfg.image_width), np.float32)
    with T.count_matmul_flops() as c:
        M.forward(x, spec, p)
    assert c[0] == A.count_flops(spec, include_head=True)


def test_full_size_instrumentation():
    spec = M.preset("mulvit_tf")
    with T.count_matmul_flops() as c:
        M.forward(np.zeros((2, 3, 240, 320), np.float32), spec, M.init_params(spec))
    assert c[0] == EXACT["mulvit_tf"][0] + A.cost_report(spec).head_flops
