import io
import os
import csv
import json
import hashlib
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout

from soap3d.__main__ import libmain, parseArgs
from soap3d.dataset import open_dataset

TINY_CONFIG = """\
[synth]
n_rows = 2
row_length = 10
trees_per_row = 5
points_per_tree = 60
ground_points = 80
headland = 2
extremity_length = 2
scan_spacing = 1
sensor_range = 10
lap_gap = 40

[pipeline]
downsample_points = 2000
grid_size = 0.2
k_neighbors = 8
feature_dim = 4

[head]
descriptor_dim = 8

[train]
epochs = 1
m_neg = 3
neg_radius = 5
lr = 0.001

[eval]
sweep_radii = 1, 2, 5
"""

def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = libmain(list(argv) + ['--no-log'])
    return code, out.getvalue(), err.getvalue()

def checksums(root):
    """sha256 of every file under `root`, keyed by relative path."""
    sums = dict()
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            path = os.path.join(dirpath, name)
            with open(path, 'rb') as fd:
                sums[os.path.relpath(path, root)] = hashlib.sha256(
                    fd.read()).hexdigest()
    return sums

def read_bytes(path):
    with open(path, 'rb') as fd:
        return fd.read()


class TestArguments(unittest.TestCase):
    def test_no_command(self):
        with redirect_stdout(io.StringIO()):
            self.assertEqual(parseArgs([]), 1)

    def test_parse_error(self):
        with redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as cm:
                parseArgs(['eval'])
        self.assertEqual(cm.exception.code, 2)

    def test_exclusive_sources(self):
        with redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit):
                parseArgs(['eval', 'ds', '--checkpoint', 'a',
                           '--descriptors', 'b'])

    def test_repeated_overrides(self):
        args = parseArgs(['train', 'a', 'b', '-o', 'train.epochs=2',
                          '-o', 'train.lr=0.1', '--seed', '4'])
        self.assertEqual(args.datasets, ['a', 'b'])
        self.assertEqual(args.option, ['train.epochs=2', 'train.lr=0.1'])
        self.assertEqual(args.seed, 4)


class TestErrors(unittest.TestCase):
    def test_missing_dataset(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(SystemExit) as cm:
                run('eval', os.path.join(tmp, 'nowhere'), '--out', tmp)
        self.assertEqual(cm.exception.code, 10)

    def test_unknown_option(self):
        err = io.StringIO()
        with tempfile.TemporaryDirectory() as tmp:
            with redirect_stderr(err), self.assertRaises(SystemExit) as cm:
                libmain(['gen-synth', '--out', tmp, '-o', 'synth.bogus=1',
                         '--no-log'])
        self.assertEqual(cm.exception.code, 10)
        self.assertTrue(err.getvalue().startswith(
            "error: ConfigurationError:"))
        self.assertEqual(len(err.getvalue().splitlines()), 1)

    def test_invalid_orchard(self):
        err = io.StringIO()
        with tempfile.TemporaryDirectory() as tmp:
            with redirect_stderr(err), self.assertRaises(SystemExit) as cm:
                libmain(['gen-synth', '--out', tmp, '-o', 'synth.n_rows=0',
                         '--no-log'])
        self.assertEqual(cm.exception.code, 10)
        self.assertEqual(err.getvalue().splitlines(), [
            "error: ConfigurationError: synth.n_rows must be >= 1, got 0"])

    def test_corrupt_scan(self):
        err = io.StringIO()
        with tempfile.TemporaryDirectory() as tmp:
            config = os.path.join(tmp, 'tiny.cfg')
            with open(config, 'w') as fd:
                fd.write(TINY_CONFIG)
            data = os.path.join(tmp, 'orchard')
            self.assertEqual(run('gen-synth', '-c', config, '--out', data)[0],
                             0)
            scan = open_dataset(data).scan_path(2)
            with open(scan, 'r+b') as fd:
                fd.truncate(13)
            with redirect_stderr(err), self.assertRaises(SystemExit) as cm:
                libmain(['extract', data, '-c', config, '--no-log'])
        self.assertEqual(cm.exception.code, 10)
        lines = err.getvalue().splitlines()
        self.assertEqual(len(lines), 1)
        self.assertTrue(lines[0].startswith("error: ParseException: "))
        self.assertIn(scan, lines[0])


class TestPipeline(unittest.TestCase):
    """gen-synth, extract, train, eval and sweep on a tiny orchard."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = cls.tmp.name
        cls.config = os.path.join(cls.root, 'tiny.cfg')
        with open(cls.config, 'w') as fd:
            fd.write(TINY_CONFIG)
        cls.data = os.path.join(cls.root, 'orchard')
        cls.out = os.path.join(cls.root, 'out')
        assert run('gen-synth', '-c', cls.config, '--seed', '3',
                   '--out', cls.data)[0] == 0
        assert run('extract', cls.data, '-c', cls.config, '--seed', '3')[0] == 0
        assert run('train', cls.data, '-c', cls.config, '--seed', '3',
                   '--out', cls.out)[0] == 0

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def test_dataset_layout(self):
        for name in ('poses.csv', 'segments.csv', 'scans', 'features',
                     'synth.json'):
            self.assertTrue(os.path.exists(os.path.join(self.data, name)),
                            name)

    def test_train_outputs(self):
        for name in ('head.soapm', 'head.soapm.cfg', 'head.soapm.opt',
                     'train_log.csv', 'train.json'):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)), name)
        with open(os.path.join(self.out, 'train_log.csv')) as fd:
            rows = list(csv.DictReader(fd))
        self.assertEqual([row['epoch'] for row in rows], ['1'])

    def test_eval(self):
        out = os.path.join(self.root, 'eval')
        code, stdout, _ = run('eval', self.data, '-c', self.config,
                              '--checkpoint',
                              os.path.join(self.out, 'head.soapm'),
                              '--save-descriptors', '--out', out)
        self.assertEqual(code, 0)
        with open(os.path.join(out, 'report.json')) as fd:
            report = json.load(fd)
        for value in report['recalls'].values():
            self.assertTrue(0.0 <= value <= 1.0)
        self.assertEqual(len(stdout.splitlines()), 2)

        # Saved descriptors are float32; score them without recomputing.
        again = os.path.join(self.root, 'eval2')
        code, _, _ = run('eval', self.data, '-c', self.config,
                         '--descriptors', os.path.join(out, 'orchard.soapd'),
                         '--out', again)
        self.assertEqual(code, 0)
        with open(os.path.join(again, 'report.json')) as fd:
            second = json.load(fd)
        self.assertEqual(set(second['recalls']), set(report['recalls']))
        self.assertEqual(second['queries'], report['queries'])

    def test_sweep(self):
        out = os.path.join(self.root, 'sweep')
        code, _, _ = run('sweep', self.data, '-c', self.config,
                         '--checkpoint', os.path.join(self.out, 'head.soapm'),
                         '--out', out)
        self.assertEqual(code, 0)
        with open(os.path.join(out, 'sweep.csv')) as fd:
            rows = list(csv.DictReader(fd))
        # sweep_k (1, 10) x three radii.
        self.assertEqual(len(rows), 6)
        self.assertEqual(set(rows[0]), {'k', 'r_th', 'recall', 'eligible'})

    def test_resume(self):
        out = os.path.join(self.root, 'resumed')
        code, _, _ = run('train', self.data, '-c', self.config, '--seed', '3',
                         '-o', 'train.epochs=2', '--out', out, '--resume',
                         os.path.join(self.out, 'head.soapm'))
        self.assertEqual(code, 0)
        with open(os.path.join(out, 'train_log.csv')) as fd:
            rows = list(csv.DictReader(fd))
        self.assertEqual([row['epoch'] for row in rows], ['2'])

    def test_ablate(self):
        out = os.path.join(self.root, 'ablation')
        code, _, _ = run('ablate', self.data, '-c', self.config, '--seed', '3',
                         '--out', out)
        self.assertEqual(code, 0)
        with open(os.path.join(out, 'ablation.json')) as fd:
            rows = json.load(fd)['rows']
        self.assertEqual([row['variant'] for row in rows],
                         ['pool', 'FC', 'FC+LOG', 'FC+LOG+PN', 'max+FC+PN'])

    def test_crossval(self):
        grove = os.path.join(self.root, 'grove')
        self.assertEqual(run('gen-synth', '-c', self.config, '--seed', '4',
                             '--out', grove)[0], 0)
        self.assertEqual(run('extract', grove, '-c', self.config)[0], 0)
        out = os.path.join(self.root, 'crossval')
        code, stdout, _ = run('crossval', self.data, grove, '-c', self.config,
                              '--seed', '3', '--out', out)
        self.assertEqual(code, 0)
        with open(os.path.join(out, 'crossval.csv')) as fd:
            rows = list(csv.DictReader(fd))
        self.assertEqual([row['sequence'] for row in rows],
                         ['orchard', 'grove', 'MEAN'])
        self.assertEqual(len(stdout.splitlines()), 3)

    def test_train_reproducible(self):
        again = os.path.join(self.root, 'again')
        self.assertEqual(run('train', self.data, '-c', self.config, '--seed', '3',
                             '--out', again)[0], 0)
        for name in ('head.soapm', 'head.soapm.opt', 'train_log.csv'):
            self.assertEqual(read_bytes(os.path.join(again, name)),
                             read_bytes(os.path.join(self.out, name)), name)

    def test_submaps(self):
        out = os.path.join(self.root, 'submaps')
        code, _, _ = run('submaps', self.data, '-c', self.config,
                         '-o', 'pipeline.submap_window=4', '--out', out)
        self.assertEqual(code, 0)
        scans = open_dataset(self.data).records
        merged = open_dataset(out).records
        self.assertEqual([r.scan_id for r in merged],
                         [r.scan_id for r in scans[::4]])
        self.assertEqual(run('extract', out, '-c', self.config)[0], 0)


class TestReproducibility(unittest.TestCase):
    """Same seed and '--threads 1' give byte-identical outputs."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = self.tmp.name
        self.config = os.path.join(self.root, 'tiny.cfg')
        with open(self.config, 'w') as fd:
            fd.write(TINY_CONFIG)

    def tearDown(self):
        self.tmp.cleanup()

    def gen_synth(self, name, *extra):
        out = os.path.join(self.root, name)
        self.assertEqual(run('gen-synth', '-c', self.config, '--seed', '8',
                             '--out', out, *extra)[0], 0)
        return out

    def test_gen_synth(self):
        first = checksums(self.gen_synth('a'))
        self.assertIn('poses.csv', first)
        self.assertEqual(checksums(self.gen_synth('b')), first)

    def test_crossval(self):
        root = self.gen_synth('seqs', '--sequences', '3')
        datasets = [os.path.join(root, 'seq_{:02d}'.format(i)) for i in range(3)]
        self.assertEqual(run('extract', *datasets, '-c', self.config,
                             '--threads', '1')[0], 0)
        outputs = []
        for name in ('cv1', 'cv2'):
            out = os.path.join(self.root, name)
            code, stdout, _ = run('crossval', *datasets, '-c', self.config,
                                  '--seed', '3', '--threads', '1', '--out', out)
            self.assertEqual(code, 0)
            outputs.append((stdout, checksums(out)))
        self.assertEqual(len(outputs[0][0].splitlines()), 4)
        self.assertEqual(set(outputs[0][1]), {'crossval.csv', 'crossval.json'})
        self.assertEqual(outputs[0], outputs[1])

if __name__ == '__main__':
    unittest.main()
