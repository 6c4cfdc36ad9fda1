import argparse
import os

import h5py
import matplotlib.pyplot as plt
import numpy as np

from optical_signature import artifacts, config


WANDB_ENTITY = None
WANDB_PROJECT = 'vis_optsig'


parser = argparse.ArgumentParser()
parser.add_argument('run_dir', help='report directory written by `optsig verify`')
parser.add_argument('--report', default='report.json', help='report file inside run_dir')
args = parser.parse_args()

if WANDB_ENTITY is not None:
    import wandb
    render_wandb = True
    wandb.init(entity=WANDB_ENTITY,
               project=WANDB_PROJECT)
else:
    render_wandb = False


def show(fig, tag):
    if render_wandb:
        wandb.log({tag: wandb.Image(fig)})


report = artifacts.read_json(os.path.join(args.run_dir, args.report))
print(f"Visualizing run: {args.run_dir}  decision: {report['decision']}")
if report['failure_reason']:
    print(f"Pipeline failure: {report['failure_reason']}, nothing recovered to plot")

# per-window distances against the thresholds
windows = report['windows']
if windows:
    idx = [w['index'] for w in windows]
    fig = plt.figure('distances', figsize=(10, 4))
    for tag, thresh in (('dyn_distance', report['thresholds']['dyn']),
                        ('id_distance', report['thresholds']['identity'])):
        values = [np.nan if w[tag] is None else w[tag] for w in windows]
        line, = plt.plot(idx, values, 'o-', label=tag)
        plt.axhline(thresh, color=line.get_color(), linestyle='--')
    plt.xlabel('window')
    plt.ylabel('Hamming distance')
    plt.legend()
    plt.title(f"{report['decision']} (max dyn {report['max_dyn_distance']}, "
              f"max id {report['max_id_distance']})")
    show(fig, 'distances')

# heatmap and soft bits from the analysis dump
# report-N.json pairs with analysis-N.h5
suffix = os.path.splitext(args.report)[0][len('report'):]
analysis_path = os.path.join(args.run_dir, f'analysis{suffix}.h5')
if os.path.exists(analysis_path):
    with h5py.File(analysis_path, 'r') as f:
        n_windows = artifacts.get_hdf5_length(f, keys_to_ignore=('heatmap', 'homography',
                                                                 'corners', 'sync_reference'))
        analysis = artifacts.load_hdf5_to_dict(f)
    print(f"{os.path.basename(analysis_path)} holds {n_windows} windows")

    fig = plt.figure('heatmap', figsize=(8, 5))
    plt.imshow(artifacts.heatmap_image(analysis['heatmap']), cmap='gray')
    corners = analysis['corners']
    plt.plot(*np.vstack([corners, corners[:1]]).T, 'r-')
    plt.title(f"{config.F_L:g} Hz energy with localized corners")
    show(fig, 'heatmap')

    soft = analysis['soft_bits']
    if len(soft):
        fig = plt.figure('soft_bits', figsize=(5 * len(soft), 4))
        for i, bits in enumerate(soft):
            plt.subplot(1, len(soft), i + 1)
            plt.hist(bits, bins=50)
            plt.title(f"window {i}: mean |llr| {np.abs(bits).mean():.2f}")
        show(fig, 'soft_bits')

if not render_wandb:
    plt.show()
