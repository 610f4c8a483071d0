import numpy as np
import pytest

from fieldlift.arrays import SeededRng
from fieldlift.metrics import MetricRow, assemble_report, nmse, psnr, write_report


class TestNmse:
    def test_equal_is_zero(self):
        x = SeededRng(0).normal((8, 8))
        assert nmse(x, x) == 0.0

    def test_zero_reconstruction_is_one(self):
        x = SeededRng(1).normal((8, 8))
        assert nmse(x, np.zeros_like(x)) == pytest.approx(1.0)

    def test_double_is_one(self):
        x = SeededRng(2).normal((8, 8))
        assert nmse(x, 2 * x) == pytest.approx(1.0)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            nmse(np.zeros((4, 4)), np.ones((4, 4)))

    def test_not_symmetric(self):
        rng = SeededRng(3)
        a, b = rng.normal((8, 8)) + 2.0, rng.normal((8, 8))
        assert nmse(a, b) != nmse(b, a)


class TestPsnr:
    def test_peak_one_mse_hundredth(self):
        ref = np.zeros((10, 10))
        ref[0, 0] = 1.0  # peak 1
        rec = ref + 0.1  # mse 0.01
        assert psnr(ref, rec) == pytest.approx(20.0)

    def test_equal_capped(self):
        x = SeededRng(4).normal((8, 8))
        assert psnr(x, x) == 99.0

    def test_halving_mse_gains_3db(self):
        ref = np.full((8, 8), 0.5)
        ref[0, 0] = 1.0
        rng = SeededRng(5)
        err = rng.normal((8, 8))
        a = psnr(ref, ref + err)
        b = psnr(ref, ref + err / np.sqrt(2))
        assert b - a == pytest.approx(10 * np.log10(2), abs=1e-9)

    def test_consistency_with_nmse(self):
        rng = SeededRng(6)
        for _ in range(20):
            ref = rng.uniform((16, 16), 0.1, 1.0)
            rec = ref + 0.05 * rng.normal((16, 16))
            lhs = psnr(ref, rec)
            rhs = 10 * np.log10(ref.max() ** 2 * ref.size) - 10 * np.log10(
                nmse(ref, rec) * np.sum(ref**2)
            )
            assert abs(lhs - rhs) < 1e-9


class TestReport:
    def make_pairs(self, seed, n=4):
        rng = SeededRng(seed)
        return [
            (rng.uniform((8, 8), 0.2, 1.0), rng.uniform((8, 8), 0.2, 1.0)) for _ in range(n)
        ]

    def test_single_image_zero_std(self):
        pairs = self.make_pairs(7, n=1)
        rows = assemble_report([{"method": "m", "dataset": "d", "pairs": pairs}])
        assert rows[0].n == 1
        assert rows[0].nmse_std == 0.0 and rows[0].psnr_std == 0.0

    def test_identical_methods_identical_rows(self):
        pairs = self.make_pairs(8)
        rows = assemble_report(
            [
                {"method": "a", "dataset": "d", "pairs": pairs},
                {"method": "b", "dataset": "d", "pairs": pairs},
            ]
        )
        assert rows[0].nmse_mean == rows[1].nmse_mean
        assert rows[0].psnr_mean == rows[1].psnr_mean

    def test_best_flags(self):
        rng = SeededRng(9)
        ref = rng.uniform((8, 8), 0.2, 1.0)
        good = [(ref, ref + 0.01 * rng.normal((8, 8)))]
        bad = [(ref, ref + 0.3 * rng.normal((8, 8)))]
        rows = assemble_report(
            [
                {"method": "good", "dataset": "d", "pairs": good},
                {"method": "bad", "dataset": "d", "pairs": bad},
            ]
        )
        by_name = {r.method: r for r in rows}
        assert by_name["good"].best_nmse and by_name["good"].best_psnr
        assert not by_name["bad"].best_nmse and not by_name["bad"].best_psnr

    def test_write_report_files(self, tmp_path):
        pairs = self.make_pairs(10)
        rows = assemble_report([{"method": "m", "dataset": "d", "pairs": pairs}])
        write_report(tmp_path / "report", rows)
        text = (tmp_path / "report.csv").read_text().splitlines()
        assert text[0] == "method,dataset,n,nmse_mean,nmse_std,psnr_mean,psnr_std"
        assert text[1].startswith("m,d,4,")
        import json

        payload = json.loads((tmp_path / "report.json").read_text())
        assert len(payload[0]["per_image"]["nmse"]) == 4

    def test_empty_runs_rejected(self):
        with pytest.raises(ValueError):
            assemble_report([])
