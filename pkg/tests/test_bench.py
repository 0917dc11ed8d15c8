import math
import os
import unittest

from bimamba import bench
from bimamba._exceptions import ConfigError, InsufficientDataError
from bimamba.bench import BenchConfig, BenchRecord, Kernel

SLOW = os.environ.get("BIMAMBA_SLOW_TESTS") == "1"

SMALL = BenchConfig(
    d_model=16, d_inner=32, d_state=4, heads=4, repeats=5, warmup=2
)


def synthetic_records(
    kernel: str, exponent: float, lengths, scale=1000.0, training=False
):
    return [
        BenchRecord(
            kernel=kernel,
            L=n,
            D=16,
            E=32,
            N=4,
            heads=0,
            wall_ns=int(scale * n**exponent),
            peak_bytes=int(4 * scale * n**exponent),
            train_peak_bytes=int(12 * scale * n**exponent) if training else 0,
        )
        for n in lengths
    ]


class TestResolutionLengths(unittest.TestCase):
    def test_multi_view(self):
        self.assertEqual(
            bench.resolution_lengths((224, 384, 448, 512)),
            [393, 1153, 1569, 2049],
        )

    def test_single_view(self):
        self.assertEqual(
            bench.resolution_lengths((224, 512), views="single"), [197, 1025]
        )

    def test_indivisible(self):
        with self.assertRaises(ConfigError):
            bench.resolution_lengths((100,), patch_size=16)


class TestFitExponent(unittest.TestCase):
    def test_recovers_power_law(self):
        for exponent in (1.0, 2.0):
            with self.subTest(msg=f"exponent={exponent}"):
                records = synthetic_records(
                    "attn_block", exponent, (256, 512, 1024, 2048, 4096)
                )
                for value in ("wall_ns", "peak_bytes"):
                    fit = bench.fit_exponent(records, value)
                    self.assertAlmostEqual(fit.slope, exponent, places=3)
                    self.assertGreater(fit.r_squared, 0.9999)

    def test_insufficient_data(self):
        cases = {
            "three points": (256, 1024, 4096),
            "narrow span": (256, 512, 1024, 1536),
        }
        for name, lengths in cases.items():
            records = synthetic_records("attn_block", 2.0, lengths)
            with self.subTest(msg=name):
                with self.assertRaises(InsufficientDataError):
                    bench.fit_exponent(records)

    def test_rejects_mixed_kernels(self):
        records = synthetic_records(
            "attn_block", 2.0, (256, 512)
        ) + synthetic_records("bimamba_block", 1.0, (1024, 2048))
        with self.assertRaises(ValueError):
            bench.fit_exponent(records)


class TestReport(unittest.TestCase):
    def test_csv_round_trip_and_summary(self):
        lengths = (256, 512, 1024, 2048)
        records = synthetic_records(
            "bimamba_block", 1.0, lengths, training=True
        ) + synthetic_records(
            "attn_block", 2.0, lengths, scale=1.0, training=True
        )
        csv_text, summary = bench.report(records)
        self.assertEqual(
            csv_text.splitlines()[0],
            "kernel,L,D,E,N,heads,wall_ns,peak_bytes,train_peak_bytes",
        )
        self.assertEqual(bench.read_report(csv_text), records)
        self.assertIn("bimamba_block: time exponent 1.000", summary)
        self.assertIn("attn_block: time exponent 2.000", summary)
        self.assertIn("memory at L=2048", summary)
        self.assertIn("training memory exponent 2.000", summary)
        self.assertIn("training memory at L=2048", summary)

    def test_scans_report_no_training_memory(self):
        records = synthetic_records(
            "scan_parallel", 1.0, (256, 512, 1024, 2048)
        )
        _, summary = bench.report(records)
        self.assertIn("scan_parallel: time exponent", summary)
        self.assertNotIn("training", summary)

    def test_too_few_points_is_reported_not_raised(self):
        records = synthetic_records("scan_parallel", 1.0, (16, 32))
        _, summary = bench.report(records)
        self.assertIn("scan_parallel: no exponent fit", summary)

    def test_empty(self):
        with self.assertRaises(InsufficientDataError):
            bench.report([])

    def test_bad_header(self):
        with self.assertRaises(ValueError):
            bench.read_report("kernel,L\nattn_block,16\n")


class TestMeasure(unittest.TestCase):
    def test_config_limits(self):
        with self.assertRaises(ConfigError):
            BenchConfig(repeats=4)
        with self.assertRaises(ConfigError):
            BenchConfig(warmup=1)
        self.assertEqual(BenchConfig().heads, 6)

    def test_lengths_must_increase(self):
        for lengths in ((16,), (32, 16), (16, 16)):
            with self.subTest(msg=str(lengths)):
                with self.assertRaises(ConfigError):
                    bench.measure("scan_parallel", lengths, SMALL)

    def test_records(self):
        records = bench.measure(Kernel.ATTN_BLOCK, (8, 16), SMALL)
        self.assertEqual([r.L for r in records], [8, 16])
        for record in records:
            self.assertEqual(record.kernel, "attn_block")
            self.assertEqual((record.E, record.N, record.heads), (0, 0, 4))
            self.assertEqual(len(record.raw_ns), SMALL.repeats)
            self.assertGreater(record.wall_ns, 0)
            self.assertGreater(record.peak_bytes, 0)
            self.assertGreaterEqual(record.train_peak_bytes, record.peak_bytes)

    def test_training_peak_covers_the_forward_pass(self):
        for kernel in ("bimamba_block", "attn_block"):
            with self.subTest(msg=kernel):
                for record in bench.measure(kernel, (16, 64), SMALL):
                    self.assertGreaterEqual(
                        record.train_peak_bytes, record.peak_bytes
                    )
        for record in bench.measure("scan_parallel", (16, 32), SMALL):
            self.assertEqual(record.train_peak_bytes, 0)

    def test_wall_time_grows_with_length(self):
        sweeps = {
            "bimamba_block": (64, 512, 4096),
            "attn_block": (64, 256, 1024),
        }
        for kernel, lengths in sweeps.items():
            with self.subTest(msg=kernel):
                records = bench.measure(kernel, lengths, SMALL)
                times = [r.wall_ns for r in records]
                self.assertEqual(times, sorted(times), times)

    def test_default_widths_stay_finite(self):
        # d_state=16 at the default bench widths
        for kernel in ("scan_sequential", "bimamba_block"):
            with self.subTest(msg=kernel):
                records = bench.measure(kernel, (256, 512), BenchConfig())
                for record in records:
                    self.assertTrue(math.isfinite(record.checksum))

    def test_scans_agree(self):
        lengths = (16, 64)
        sequential = bench.measure("scan_sequential", lengths, SMALL)
        parallel = bench.measure("scan_parallel", lengths, SMALL)
        for a, b in zip(sequential, parallel):
            with self.subTest(msg=f"L={a.L}"):
                tolerance = 1e-3 * max(1.0, abs(a.checksum))
                self.assertAlmostEqual(a.checksum, b.checksum, delta=tolerance)

    def test_peak_bytes_are_deterministic(self):
        lengths = (16, 32)
        first = bench.measure("bimamba_block", lengths, SMALL)
        second = bench.measure("bimamba_block", lengths, SMALL)
        self.assertEqual(
            [r.peak_bytes for r in first], [r.peak_bytes for r in second]
        )

    def test_memory_growth(self):
        lengths = (32, 64, 128, 256)
        records = bench.sweep(("bimamba_block", "attn_block"), lengths, SMALL)
        grouped = {
            kernel: [r for r in records if r.kernel == kernel]
            for kernel in ("bimamba_block", "attn_block")
        }
        ssm = bench.fit_exponent(grouped["bimamba_block"], "peak_bytes")
        attn = bench.fit_exponent(grouped["attn_block"], "peak_bytes")
        self.assertLess(ssm.slope, 1.3)
        self.assertGreater(attn.slope, 1.5)


@unittest.skipUnless(SLOW, "set BIMAMBA_SLOW_TESTS=1 to run")
class TestScaling(unittest.TestCase):
    def test_time_exponents(self):
        records = bench.sweep(
            ("bimamba_block", "attn_block"),
            bench.DEFAULT_LENGTHS,
            BenchConfig(d_model=384, d_inner=768),
        )
        ssm = bench.fit_exponent(
            [r for r in records if r.kernel == "bimamba_block"]
        )
        attn = bench.fit_exponent(
            [r for r in records if r.kernel == "attn_block"]
        )
        self.assertLess(ssm.slope, 1.3)
        self.assertGreater(attn.slope, 1.6)
        by_length = {(r.kernel, r.L): r.peak_bytes for r in records}
        self.assertLess(
            by_length["bimamba_block", 4096], by_length["attn_block", 4096]
        )
        training = {(r.kernel, r.L): r.train_peak_bytes for r in records}
        self.assertLess(
            training["bimamba_block", 4096], training["attn_block", 4096]
        )
