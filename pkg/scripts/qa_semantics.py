"""Paired check that the quality scalars move the right way under scan damage.

For each of N clouds, compares c_uniformity before and after an occlusion
stripe, and c_integrity before and after normal-direction noise.
"""

import argparse

from cinet.quality import grid_uniformity, quality_vector
from cinet.synthetic import ArtifactSpec, GeneratorConfig, add_normal_noise, apply_scan_artifacts, generate_cloud


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-n", type=int, default=20)
    ap.add_argument("--sigma", type=float, nargs="+", default=[0.002, 0.005, 0.01, 0.02])
    args = ap.parse_args()
    gen = GeneratorConfig()
    gen.artifacts = ArtifactSpec(occlusion_prob=0.0, blur_rate=0.0)
    occ = ArtifactSpec(occlusion_prob=1.0, blur_rate=0.0)
    print("cloud  uniformity  occluded  integrity  " + "  ".join(f"s={s:g}" for s in args.sigma))
    for i in range(args.n):
        cloud = generate_cloud(gen, i)
        q = quality_vector(cloud)
        u = grid_uniformity(apply_scan_artifacts(cloud, occ, 100 + i))
        noisy = [quality_vector(add_normal_noise(cloud, s, 200 + i)).integrity for s in args.sigma]
        print(f"{i:5d}  {q.uniformity:10.4f}  {u:8.4f}  {q.integrity:9.5f}  " + "  ".join(f"{v:.5f}" for v in noisy))


if __name__ == "__main__":
    main()
