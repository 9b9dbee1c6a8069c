import os
import tempfile
import unittest

import numpy as np

from soap3d.common import ConfigurationError
from soap3d.dataset import open_dataset
from soap3d.synthgen import (OrchardSpec, plan_path, corridor_y,
                             generate_orchard, write_dataset)

def small_spec(**changes):
    # Path per lap: 2 + 2 * 10 + (2 + 3 + 2) + 2 = 31 m.
    values = dict(n_rows=2, row_length=10.0, row_spacing=3.0,
                  trees_per_row=5, points_per_tree=30, ground_points=50,
                  headland=2.0, extremity_length=2.0, scan_spacing=1.0,
                  n_passes=2, sensor_range=8.0, lap_gap=30.0, seed=5)
    values.update(changes)
    return OrchardSpec(**values)


class TestOrchardSpec(unittest.TestCase):
    def test_invalid(self):
        with self.assertRaises(ConfigurationError):
            OrchardSpec(n_rows=0)
        with self.assertRaises(ConfigurationError):
            OrchardSpec(permeability=1.5)
        with self.assertRaises(ConfigurationError):
            OrchardSpec(extremity_length=0.0)

    def test_segments(self):
        self.assertEqual(OrchardSpec(n_rows=4).n_segments, 9)


class TestPath(unittest.TestCase):
    def test_segment_order(self):
        spec = small_spec(n_rows=3)
        ids = [p.segment_id for p in plan_path(spec)]
        self.assertEqual(sorted(set(ids)), list(range(spec.n_segments)))
        self.assertEqual(ids, sorted(ids))

    def test_rows_follow_corridors(self):
        spec = small_spec(n_rows=3)
        for piece in plan_path(spec):
            if piece.segment_id % 2 == 1:
                row = piece.segment_id // 2
                self.assertEqual(piece.start[1], corridor_y(spec, row))
                self.assertEqual(piece.end[1], corridor_y(spec, row))
                self.assertEqual(abs(piece.end[0] - piece.start[0]),
                                 spec.row_length)

    def test_connected(self):
        pieces = plan_path(small_spec(n_rows=3))
        for a, b in zip(pieces, pieces[1:]):
            self.assertEqual(a.end, b.start)


class TestGenerate(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.spec = small_spec()
        cls.scans, cls.records = generate_orchard(cls.spec)

    def test_scan_count(self):
        # Lap 0 samples 0, 1, ..., 31 m; lap 1 samples 0.5, 1.5, ..., 30.5 m.
        self.assertEqual(len(self.records), 32 + 31)
        self.assertEqual(len(self.scans), len(self.records))
        self.assertEqual([r.scan_id for r in self.records],
                         list(range(len(self.records))))

    def test_every_pass_covers_every_segment(self):
        for lap in range(self.spec.n_passes):
            segments = {r.segment_id for r in self.records if r.pass_id == lap}
            self.assertEqual(segments, set(range(self.spec.n_segments)))

    def test_timestamps_increase(self):
        times = [r.timestamp for r in self.records]
        self.assertTrue(all(b > a for a, b in zip(times, times[1:])))
        first_lap_end = max(r.timestamp for r in self.records
                            if r.pass_id == 0)
        second_lap_start = min(r.timestamp for r in self.records
                               if r.pass_id == 1)
        self.assertGreaterEqual(second_lap_start - first_lap_end,
                                self.spec.lap_gap)

    def test_deterministic(self):
        scans, records = generate_orchard(small_spec())
        self.assertEqual(records, self.records)
        for a, b in zip(scans, self.scans):
            self.assertTrue(np.array_equal(a.points, b.points))

    def test_seed_changes_scene(self):
        scans, _ = generate_orchard(small_spec(seed=6))
        self.assertFalse(np.array_equal(scans[0].points, self.scans[0].points))

    def test_points_within_range(self):
        for cloud in self.scans:
            self.assertTrue(np.all(np.linalg.norm(cloud.points[:, :2], axis=1)
                                   <= self.spec.sensor_range + 1e-9))

    def test_opaque_rows(self):
        spec = small_spec(permeability=0.0)
        scans, records = generate_orchard(spec)
        for cloud, record in zip(scans, records):
            if record.segment_id % 2 == 0:
                continue
            row = record.segment_id // 2
            y = cloud.points[:, 1] + record.position[1]
            self.assertTrue(np.all(y >= row * spec.row_spacing - 1e-9))
            self.assertTrue(np.all(y <= (row + 1) * spec.row_spacing + 1e-9))

    def test_permeability_monotone(self):
        counts = []
        for permeability in (0.0, 0.5, 1.0):
            scans, _ = generate_orchard(small_spec(permeability=permeability))
            counts.append(np.array([len(c) for c in scans]))
        self.assertTrue(np.all(counts[0] <= counts[1]))
        self.assertTrue(np.all(counts[1] <= counts[2]))
        self.assertLess(counts[0].sum(), counts[2].sum())

    def test_dataset_roundtrip(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = os.path.join(tmp, 'orchard')
            write_dataset(root, self.scans, self.records)
            ds = open_dataset(root)
            self.assertEqual([r.pass_id for r in ds.records],
                             [r.pass_id for r in self.records])
            self.assertEqual([r.segment_id for r in ds.records],
                             [r.segment_id for r in self.records])
            cloud = ds.load_scan(3)
        self.assertTrue(np.allclose(cloud.points, self.scans[3].points,
                                    atol=1e-5))



def row_voxel_keys(scans, records, n_rows, grid=0.5):
    """World-frame voxel keys seen from each row corridor."""
    keys = [set() for _ in range(n_rows)]
    for cloud, record in zip(scans, records):
        if record.segment_id % 2 == 1:
            world = cloud.points + np.asarray(record.position)
            cells = np.floor(world / grid).astype(np.int64)
            keys[record.segment_id // 2].update(map(tuple, cells))
    return keys

def jaccard(a, b):
    return len(a & b) / len(a | b)


class TestRowOverlap(unittest.TestCase):
    def test_overlap_grows_with_permeability(self):
        spec = OrchardSpec()
        overlaps, shared = [], []
        for permeability in (0.0, 0.25, 0.5, 0.75):
            scans, records = generate_orchard(
                OrchardSpec(permeability=permeability))
            keys = row_voxel_keys(scans, records, spec.n_rows)
            pairs = list(zip(keys, keys[1:]))
            overlaps.append(np.mean([jaccard(a, b) for a, b in pairs]))
            shared.append(sum(len(a & b) for a, b in pairs))
            del scans
        self.assertEqual(overlaps[0], 0.0)
        self.assertTrue(all(b > a for a, b in zip(shared, shared[1:])))
        self.assertTrue(all(b >= a for a, b in zip(overlaps, overlaps[1:])))
        self.assertGreater(overlaps[-1], overlaps[1])


class TestScanCount(unittest.TestCase):
    def lap_length(self, spec):
        return (2 * spec.extremity_length + spec.n_rows * spec.row_length +
                (spec.n_rows - 1) * (2 * spec.headland + spec.row_spacing))

    def expected_count(self, spec):
        length = self.lap_length(spec)
        return sum(int(np.floor((length - spec.scan_spacing * lap /
                                 spec.n_passes) / spec.scan_spacing + 1e-9)) + 1
                   for lap in range(spec.n_passes))

    def test_layouts(self):
        sparse = dict(points_per_tree=1, ground_points=10, permeability=1.0)
        specs = [
            OrchardSpec(**sparse),
            OrchardSpec(n_rows=1, row_length=20.0, extremity_length=4.0,
                        scan_spacing=1.0, n_passes=3, **sparse),
            OrchardSpec(n_rows=3, row_length=12.0, headland=2.0,
                        row_spacing=2.5, extremity_length=3.0,
                        scan_spacing=0.25, **sparse),
            OrchardSpec(n_rows=2, row_length=10.0, headland=2.0,
                        extremity_length=2.0, scan_spacing=1.0, n_passes=4,
                        **sparse),
        ]
        for spec in specs:
            pieces = plan_path(spec)
            length = sum(np.hypot(p.end[0] - p.start[0], p.end[1] - p.start[1])
                         for p in pieces)
            self.assertAlmostEqual(length, self.lap_length(spec))
            _, records = generate_orchard(spec)
            self.assertEqual(len(records), self.expected_count(spec))
            for lap in range(spec.n_passes):
                self.assertEqual(
                    {r.segment_id for r in records if r.pass_id == lap},
                    set(range(spec.n_segments)))
        self.assertEqual(self.expected_count(specs[0]), 837)
        self.assertEqual(self.expected_count(specs[1]), 29 + 28 + 28)

if __name__ == '__main__':
    unittest.main()
