import os
import struct
import tempfile
import unittest

import numpy

from bimamba import io_formats
from bimamba._exceptions import ParseError
from bimamba.io_formats import ManifestEntry


class TestPgm(unittest.TestCase):
    def test_round_trip_within_quantization(self):
        rng = numpy.random.default_rng(0)
        image = rng.random((7, 5))
        image[0, 0], image[-1, -1] = 0.0, 1.0
        decoded = io_formats.decode_pgm(io_formats.encode_pgm(image))
        self.assertEqual(decoded.shape, (7, 5))
        self.assertEqual(decoded.dtype, numpy.float32)
        numpy.testing.assert_allclose(decoded, image, atol=1 / 65535)
        self.assertEqual(decoded[0, 0], 0.0)
        self.assertEqual(decoded[-1, -1], 1.0)

    def test_header_layout(self):
        data = io_formats.encode_pgm(numpy.full((2, 3), 0.5))
        self.assertTrue(data.startswith(b"P5\n3 2\n65535\n"))
        self.assertEqual(len(data), len(b"P5\n3 2\n65535\n") + 2 * 3 * 2)

    def test_comments_and_8_bit(self):
        data = b"P5\n# made by hand\n2 1\n# max\n255\n" + bytes([0, 255])
        numpy.testing.assert_array_equal(
            io_formats.decode_pgm(data), [[0.0, 1.0]]
        )

    def test_file_round_trip(self):
        image = numpy.linspace(0, 1, 12).reshape(3, 4)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "x.pgm")
            io_formats.write_pgm(path, image)
            numpy.testing.assert_allclose(
                io_formats.read_pgm(path), image, atol=1 / 65535
            )

    def test_malformed(self):
        good = io_formats.encode_pgm(numpy.zeros((4, 4)))
        cases = {
            "wrong magic": (b"P2" + good[2:], 0),
            "truncated header": (b"P5\n4 4", 6),
            "truncated pixels": (good[:-3], None),
            "junk in header": (b"P5\n4 x4\n65535\n", 5),
        }
        for name, (data, offset) in cases.items():
            with self.subTest(msg=name), self.assertRaises(ParseError) as ctx:
                io_formats.decode_pgm(data)
            if offset is not None:
                self.assertEqual(ctx.exception.offset, offset)

    def test_encode_rejects_out_of_range(self):
        with self.assertRaises(ValueError):
            io_formats.encode_pgm(numpy.array([[1.5]]))
        with self.assertRaises(ValueError):
            io_formats.encode_pgm(numpy.zeros(4))


class TestVolume(unittest.TestCase):
    def test_round_trip_is_bit_exact(self):
        volume = numpy.random.default_rng(1).normal(size=(3, 4, 5))
        volume = volume.astype(numpy.float32)
        decoded = io_formats.decode_volume(io_formats.encode_volume(volume))
        self.assertEqual(decoded.tobytes(), volume.tobytes())

    def test_layout(self):
        data = io_formats.encode_volume(numpy.ones((1, 2, 3), numpy.float32))
        self.assertEqual(data[:4], b"RAWV")
        self.assertEqual(struct.unpack_from("<III", data, 4), (1, 2, 3))
        self.assertEqual(len(data), 16 + 6 * 4)

    def test_malformed(self):
        good = io_formats.encode_volume(numpy.ones((2, 2, 2)))
        cases = {
            "wrong magic": b"RAWX" + good[4:],
            "truncated extents": good[:10],
            "truncated voxels": good[:-1],
            "trailing bytes": good + b"\0",
            "zero extent": b"RAWV" + struct.pack("<III", 0, 2, 2),
        }
        for name, data in cases.items():
            with self.subTest(msg=name), self.assertRaises(ParseError):
                io_formats.decode_volume(data)


class TestManifest(unittest.TestCase):
    def test_round_trip(self):
        entries = [
            ManifestEntry("s00000", "train", 1),
            ManifestEntry("s00001", "val", 0),
            ManifestEntry("s00002", "test", 0),
        ]
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "manifest.tsv")
            io_formats.write_manifest(path, entries)
            self.assertEqual(io_formats.read_manifest(path), entries)

    def test_malformed_line_reports_offset(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "manifest.tsv")
            with open(path, "wb") as f:
                f.write(b"s1\ttrain\t1\ns2\tholdout\t0\n")
            with self.assertRaises(ParseError) as ctx:
                io_formats.read_manifest(path)
            self.assertEqual(ctx.exception.offset, len(b"s1\ttrain\t1\n"))
