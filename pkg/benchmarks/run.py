"""Long-running soap3d experiments.

Every experiment drives the ``soap3d`` command line in subprocesses, one
seed at a time, and appends its measurements to a JSON file in the results
directory right away, so an interrupted run resumes where it stopped.

    python3 run.py [RESULTS_DIR]

"""

import os
import sys
import csv
import json
import time
import subprocess
from collections import namedtuple

SEEDS = range(5)
SOAP3D = [sys.executable, '-m', 'soap3d']


class Soap3dError(subprocess.CalledProcessError):

    def __str__(self):
        return ('Command {} returned non-zero exit status {}\n'
                'stderr output:\n{}'.format(
                    self.cmd, self.returncode, self.output))

def launch(args):
    """Runs one soap3d command; raises `Soap3dError` on a non-zero exit."""
    cmd = SOAP3D + list(args) + ['-L', 'warning']
    child = subprocess.run(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                           universal_newlines=True)
    if child.returncode != 0:
        raise Soap3dError(child.returncode, cmd, child.stderr)
    return child.stdout

def read_json(path):
    with open(path) as fd:
        return json.load(fd)

def read_losses(path):
    with open(path) as fd:
        return [float(row['mean_loss']) for row in csv.DictReader(fd)]


class Experiment(namedtuple("Experiment", "name, options")):
    """Base class: `measure(seed, workdir)` returns one JSON-able result."""

    @property
    def data_file(self):
        return self.name + '.json'

    def prepare(self, seed, workdir):
        data = os.path.join(workdir, 'orchard')
        if not os.path.isdir(os.path.join(data, 'features')):
            launch(['gen-synth', '--seed', str(seed), '--out', data]
                   + self.options)
            launch(['extract', data, '--seed', str(seed)] + self.options)
        return data


class LearningSignal(Experiment):
    """Trained versus untrained head on the same orchard."""

    def measure(self, seed, workdir):
        data = self.prepare(seed, workdir)
        out = os.path.join(workdir, 'train')
        launch(['train', data, '--seed', str(seed), '--out', out]
               + self.options)
        checkpoint = os.path.join(out, 'head.soapm')
        launch(['eval', data, '--seed', str(seed), '--checkpoint', checkpoint,
                '--out', os.path.join(workdir, 'trained')] + self.options)
        launch(['eval', data, '--seed', str(seed),
                '--out', os.path.join(workdir, 'untrained')] + self.options)
        launch(['sweep', data, '--seed', str(seed), '--checkpoint', checkpoint,
                '--out', os.path.join(workdir, 'sweep')] + self.options)
        losses = read_losses(os.path.join(out, 'train_log.csv'))
        trained = read_json(os.path.join(workdir, 'trained', 'report.json'))
        untrained = read_json(os.path.join(workdir, 'untrained', 'report.json'))
        return {'first_loss': losses[0], 'last_loss': losses[-1],
                'trained': trained['recalls'],
                'untrained': untrained['recalls']}

    @staticmethod
    def summarize(results):
        gains = [r['trained']['recall@1'] - r['untrained']['recall@1']
                 for _, r, _ in results]
        return {'recall@1 gain >= 15 pp': sum(g >= 0.15 for g in gains),
                'loss decreased': sum(r['last_loss'] < r['first_loss']
                                      for _, r, _ in results),
                'seeds': len(results)}


class Ablation(Experiment):
    """The four head variants trained and scored on the same orchard."""

    def measure(self, seed, workdir):
        data = self.prepare(seed, workdir)
        out = os.path.join(workdir, 'ablation')
        launch(['ablate', data, '--seed', str(seed), '--out', out]
               + self.options)
        return {row['variant']: row['recall@1']
                for row in read_json(os.path.join(out, 'ablation.json'))['rows']}

    @staticmethod
    def summarize(results):
        variants = list(results[0][1]) if results else []
        return {v: sum(r[v] for _, r, _ in results) / len(results)
                for v in variants}


experiments = [
    LearningSignal(name='learning', options=[]),
    Ablation(name='ablation', options=[]),
    # Fully opaque rows: every row corridor is its own closed world.
    LearningSignal(name='learning_opaque',
                   options=['-o', 'synth.permeability=0.0']),
]

def run_experiment(experiment, resultsdir):
    resultsfile = os.path.join(resultsdir, experiment.data_file)
    try:
        results = read_json(resultsfile)
        if not isinstance(results, list):
            print("ERROR: results corrupted!", file=sys.stderr)
            sys.exit(1)
        print("Found existing results in", resultsfile)
    except (OSError, ValueError):
        results = []

    done = {seed for seed, _, _ in results}
    for seed in SEEDS:
        if seed in done:
            print("** Found result for %s, seed %d" % (experiment.name, seed))
            continue
        print("> Running %s, seed %d" % (experiment.name, seed))
        workdir = os.path.join(resultsdir, experiment.name,
                               "seed_{}".format(seed))
        results.append((seed, experiment.measure(seed, workdir), time.time()))
        # Save right away:
        with open(resultsfile, "w") as wf:
            json.dump(results, wf)
    print(experiment.name, json.dumps(experiment.summarize(results),
                                      sort_keys=True))

def main():
    output_dir = sys.argv[1] if len(sys.argv) > 1 else "results"
    os.makedirs(output_dir, exist_ok=True)
    if not os.path.isdir(output_dir):
        sys.stderr.write("Error: %s is not a directory!" % output_dir)
        sys.exit(1)
    for experiment in experiments:
        run_experiment(experiment, output_dir)

if __name__ == "__main__":
    main()
