import numpy as np

from pcdiff import degrade as G
from pcdiff import model as M
from pcdiff.harness.oracles import TOY


def randomised(cfg=TOY, seed=0, scale=0.3):
    """Toy parameters with every tensor redrawn, so no path is trivially zero."""
    params = M.build_params(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for p in params.list():
        p.data = (rng.standard_normal(p.shape) * scale).astype(np.float32)
    return params


def toy_context(n=96, seed=0, cfg=TOY):
    cloud, image, camera = G.synth_scene("sphere-shell", n, seed=seed, image_size=16)
    pair = G.make_pair(cloud, image, camera, G.DegradationSpec(keep_ratio=0.5, seed=seed))
    return M.Context.build(pair.input_cloud, pair.input_image, pair.camera, cfg), cloud
