"""Train the toy map decoder with and without tags on lane-ambiguous scenes.

The SD polyline looks the same whatever the lane count, so only the
``lanes`` tag tells the model where the dividers and boundaries go.  This
is a shrunken version of the acceptance run (about three minutes on one core).

Run: python demos/toy_tag_utility.py
"""

from sdprior.experiments import tag_utility

runs = tag_utility(0, modes=("no-tags", "with-tags"), epochs=20, n_train=1000, n_eval=200,
                   progress=lambda r: print(f"{r.mode:<10} mAP {r.mAP:.3f}  "
                                            + "  ".join(f"{c} {v:.3f}" for c, v in r.ap.items())
                                            + f"  ({r.seconds:.0f}s)"))
print(f"gap {runs['with-tags'].mAP - runs['no-tags'].mAP:+.3f}")
