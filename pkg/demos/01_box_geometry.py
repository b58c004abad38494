"""Box algebra: containment, point-to-box distances and max-min intersection."""

import numpy as np

from inboxrec.geometry import Box, contains, dist_in, dist_out, dist_pb, maxmin_intersect

rock = Box(center=np.array([0.0, 0.0]), offset_raw=np.array([2.0, 1.0]))
nineties = Box(center=np.array([1.5, 0.5]), offset_raw=np.array([1.0, 1.0]))

for p in ([0.5, 0.5], [3.0, 0.0], [2.0, 1.0]):
    p = np.array(p)
    print(f"p={p}: inside={bool(contains(rock, p))} "
          f"out={dist_out(p, rock):.2f} in={dist_in(p, rock):.2f} pb={dist_pb(p, rock):.2f}")

# the overlap of two concepts is again a box
both = maxmin_intersect([rock, nineties])
print("intersection center", both.center, "half-width", both.half_width)

# disjoint boxes collapse to a zero-width box between them
far = Box(np.array([10.0, 10.0]), np.array([1.0, 1.0]))
print("disjoint ->", maxmin_intersect([rock, far]).half_width)
