import os

import tqdm

from optical_signature.channel_sim import SceneConfig, save_scene
from optical_signature.descriptor import generate_key, save_key
from optical_signature.tracks import SynthConfig, jitter, save_track, synth_track, tamper

N_SPEAKERS = 3
DURATION_S = 36.0
OUT_DIR = 'data'


def create_fake_speaker(i, out_dir):
    """Original track plus a re-recorded (jittered) and a tampered copy for verification."""
    track = synth_track(SynthConfig(duration_s=DURATION_S), seed=i)
    save_track(track, os.path.join(out_dir, f'speaker_{i}.json'))
    save_track(jitter(track, 0.02, seed=1000 + i), os.path.join(out_dir, f'speaker_{i}_rerecorded.json'))
    save_track(tamper(track, 216, 108, seed=2000 + i),
               os.path.join(out_dir, f'speaker_{i}_tampered.json'))


if __name__ == '__main__':
    print("Generating example tracks...")
    os.makedirs(os.path.join(OUT_DIR, 'tracks'), exist_ok=True)
    for i in tqdm.tqdm(range(N_SPEAKERS)):
        create_fake_speaker(i, os.path.join(OUT_DIR, 'tracks'))

    save_key(generate_key(seed=0), os.path.join(OUT_DIR, 'example.key'))
    save_scene(SceneConfig(), os.path.join(OUT_DIR, 'scene.yaml'))
    save_scene(SceneConfig(cell_px=16.0, offset_px=(16.0, 16.0)),
               os.path.join(OUT_DIR, 'scene_small.yaml'))
    print('Successfully created example data!')
