"""Plots the results written by run.py.

    python3 plot.py [GRAPHS_DIR]

Sweep graphs average recall@k over the seeds of an experiment, one point
per acceptance radius. Bar graphs show seed-mean recall@1 per head variant.

"""

import os
import sys
import csv
import json
from glob import glob
from collections import namedtuple, defaultdict

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt

def avg(iterable):
    return sum(iterable) / len(iterable)

DataDir = "results/"

# ==================================================
class SweepLine(namedtuple("_SweepLine",
                           "experiment, k, aggregate, \
                           label, linestyle, color, marker, markersize")):
    def __new__(cls, experiment, k=1, aggregate=avg,
                label='No Legend', linestyle='-', color=None, marker=None,
                markersize=7):
        return super().__new__(cls, experiment, k, aggregate,
                               label, linestyle, color, marker, markersize)

    non_visual_properties = {'experiment', 'k', 'aggregate'}
    @property
    def line_properties(self):
        res = self._asdict()
        for prop in SweepLine.non_visual_properties:
            res.pop(prop)
        return res

class VariantBars(namedtuple("_VariantBars",
                             "experiment, metric, aggregate, color, width")):
    def __new__(cls, experiment, metric='recall@1', aggregate=avg,
                color='c', width=0.6):
        return super().__new__(cls, experiment, metric, aggregate, color,
                               width)

class GraphInfo(namedtuple("_GraphInfo",
                           "title, lines, bars, xlabel, ylabel, ylim, \
                           legend_position, show_grid")):
    def __new__(cls, title, lines=(), bars=None, xlabel='', ylabel='',
                ylim=(0, 1.05), legend_position="lower right",
                show_grid=True):
        return super().__new__(cls, title, lines, bars, xlabel, ylabel, ylim,
                               legend_position, show_grid)

Graph_sweep = \
    GraphInfo(
        title="Recall versus acceptance radius",
        xlabel="Acceptance radius (m)",
        ylabel="Recall",
        lines=(
            SweepLine(experiment='learning', k=1, color='b', marker='o',
                      label='recall@1'),
            SweepLine(experiment='learning', k=10, color='b', marker='s',
                      linestyle='--', label='recall@10'),
            SweepLine(experiment='learning_opaque', k=1, color='m',
                      marker='^', label='recall@1, opaque rows'),
        ))

Graph_ablation = \
    GraphInfo(
        title="Head ablation",
        ylabel="Mean recall@1",
        bars=VariantBars(experiment='ablation'),
        show_grid=False)

# ==================================================
def load_data(fromfile):
    realfile = os.path.join(DataDir, fromfile + ".json")
    with open(realfile, "r") as infd:
        results = json.load(infd)
        assert results is not None and isinstance(results, list)
        return results

def load_sweeps(experiment, k):
    """Returns ``{r_th: [recall per seed]}`` for one k."""
    points = defaultdict(list)
    pattern = os.path.join(DataDir, experiment, "seed_*", "sweep", "sweep.csv")
    for path in sorted(glob(pattern)):
        with open(path) as fd:
            for row in csv.DictReader(fd):
                if int(row['k']) == k and row['recall'] != '':
                    points[float(row['r_th'])].append(float(row['recall']))
    if not points:
        print("No sweep data for", experiment, "k =", k)
    return points

def load_sweepline(line, ax=plt):
    """Plot a sweep line on the graph, return its handle."""
    points = load_sweeps(line.experiment, line.k)
    xset = sorted(points)
    yset = [line.aggregate(points[x]) for x in xset]
    handle, = ax.plot(xset, yset, **line.line_properties)
    return handle

def load_variantbars(bars, ax):
    results = load_data(bars.experiment)
    by_variant = defaultdict(list)
    for _, data, _ in results:
        for variant, value in data.items():
            by_variant[variant].append(value)
    variants = list(by_variant)
    ax.bar(range(len(variants)),
           [bars.aggregate(by_variant[v]) for v in variants],
           color=bars.color, width=bars.width)
    ax.set_xticks(range(len(variants)))
    ax.set_xticklabels(variants)

def plot_graph(graph):
    plt.clf()
    plt.title(graph.title)
    plt.xlabel(graph.xlabel)
    plt.ylabel(graph.ylabel)
    ax = plt.subplot(111)
    handles = [load_sweepline(line, ax) for line in graph.lines]
    if graph.bars is not None:
        load_variantbars(graph.bars, ax)
    if handles:
        ax.legend(handles=handles, frameon=False, numpoints=1,
                  loc=graph.legend_position)
    ax.set_ylim(*graph.ylim)
    if graph.show_grid:
        plt.grid()

def main():
    output_dir = sys.argv[1] if len(sys.argv) > 1 else "graphs"
    os.makedirs(output_dir, exist_ok=True)
    if not os.path.isdir(output_dir):
        sys.stderr.write("Error: %s is not a directory!" % output_dir)
        sys.exit(1)
    for graph in [value for name, value in globals().items()
                  if isinstance(value, GraphInfo) and
                  name.startswith("Graph")]:
        print("Plotting %s..." % graph.title)
        plot_graph(graph)
        plt.savefig(os.path.join(output_dir,
                                 graph.title.replace(' ', '_') + ".png"))

if __name__ == "__main__":
    main()
