"""Apply the SD-prior augmentations to one synthetic scene and summarise what changed.

Run: python demos/augmentation.py
"""

import numpy as np

from sdprior.augment import AugmentConfig, augment
from sdprior.corpus import RelevanceConfig
from sdprior.toy import SceneSpec, generate_scene

frame = generate_scene(SceneSpec(signal_prob=1.0, relation_prob=1.0), seed=4).frame
cfg = AugmentConfig(drop_rate=0.1, sigma_trans=1.0, sigma_rot=2.0, tag_element_rate=0.5, tag_drop_rate=0.6)
out = augment(frame, cfg, RelevanceConfig.default(), seed=1)

before = {e.id: e for e in frame.elements}
print(f"{len(frame.elements)} elements in, {len(out.elements)} out")
for e in out.elements:
    src = before[e.id]
    moved = "" if e.xy is None else f"moved {np.linalg.norm(e.xy - src.xy, axis=1).mean():.2f} m"
    lost = sorted(set(src.tags) - set(e.tags))
    print(f"  {e.id:<3} {moved:<14} dropped tags {lost}")
