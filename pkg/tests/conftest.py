import numpy as np
import pytest

from chainsfm.geometry import (
    GlobalPose,
    Intrinsics,
    Line3,
    RelativePose,
    make_segment,
)
from chainsfm.scale import TripletFrame


@pytest.fixture
def default_K():
    return Intrinsics(fx=1200.0, fy=1200.0, cx=960.0, cy=540.0,
                      width=1920, height=1080)


def relpose_between(pose_i: GlobalPose, pose_j: GlobalPose,
                    pair) -> RelativePose:
    Rij = pose_j.rotation @ pose_i.rotation.T
    tij = pose_j.translation - Rij @ pose_i.translation
    return RelativePose(Rij, tij / np.linalg.norm(tij), tuple(pair))


def triplet_frame_from_poses(p1, p2, p3, cameras=(0, 1, 2)) -> TripletFrame:
    return TripletFrame(relpose_between(p1, p2, cameras[:2]),
                        relpose_between(p2, p3, cameras[1:]), tuple(cameras))


def project_segment(L: Line3, s0: float, s1: float, pose: GlobalPose,
                    K: Intrinsics, image: int):
    """Observed segment of the 3D line between parameters s0 and s1."""
    def px(P):
        q = pose.rotation @ (P - pose.center)
        q = q / q[2]
        return np.array([K.fx * q[0] + K.cx, K.fy * q[1] + K.cy])

    return make_segment(px(L.at(s0)), px(L.at(s1)), K, image)
