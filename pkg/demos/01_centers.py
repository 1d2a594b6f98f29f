"""
Max-Mahalanobis centers
=======================

Fixed class centers that sit on a sphere of radius C_MM and are as far
apart as L points on that sphere can be. Every pair has inner product
-C_MM^2 / (L - 1).
"""
import numpy as np

from mmclab.geometry import ClassTree, center_dispersion, generate_hm_centers, generate_mm_centers

# ten classes in a 16-d feature space, radius 10
cs = generate_mm_centers(10.0, 16, 10)
mu = cs.centers
print("centers:", mu.shape)
print("norms:", np.round(np.linalg.norm(mu, axis=1), 12))

gram = mu @ mu.T
off = gram[~np.eye(10, dtype=bool)]
print("off-diagonal inner products: min %.10f max %.10f (target %.10f)"
      % (off.min(), off.max(), -100 / 9))

# the smallest angle between two centers is arccos(-1/(L-1))
disp = center_dispersion(cs)
print("min angle %.6f rad vs arccos(-1/9) = %.6f" % (disp["min_angle"], np.arccos(-1 / 9)))

# L classes only need d = L - 1 dimensions: the centers form a regular simplex
tri = generate_mm_centers(1.0, 2, 3).centers
print("three classes in the plane:\n", np.round(tri, 6))

# a two-level tree: 3 super-classes with 4 sub-classes each; sub-class
# centers are spread around their parent at a smaller scale
tree = ClassTree.two_level(3, 4, scales=(10.0, 3.0))
hm = generate_hm_centers(tree, 16)
print("hierarchical centers:", hm.centers.shape)
