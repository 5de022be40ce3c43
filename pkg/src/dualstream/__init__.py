"""DualStream: two-stream RGB-D colour-coding, compositing and shared-AR session simulation."""

from __future__ import annotations

from .composite import CompositeFrame, Quadrant, pack, parse, serialize, unpack
from .depthcodec import ENV_PROFILE, SELF_PROFILE, ColorizationParams, Scheme, decode_depth, decode_depth_m, encode_depth
from .frames import ColorFrame, DepthFrame
from .geometry import AnchorFrame, Intrinsics, Pose, compose, from_anchor_frame, invert, to_anchor_frame, unproject
from .netsim import DegradationModel, Link, LinkModel, degrade, schedule
from .pointcloud import PointCloud, SpatialQuad, export_ply, make_spatial_quad, reconstruct_hologram
from .protocol import RoomState, apply, decode_message, encode_message, state_digest

__version__ = "0.1.0"

__all__ = [
    "AnchorFrame", "ColorFrame", "ColorizationParams", "CompositeFrame", "DegradationModel", "DepthFrame",
    "ENV_PROFILE", "Intrinsics", "Link", "LinkModel", "PointCloud", "Pose", "Quadrant", "RoomState",
    "SELF_PROFILE", "Scheme", "SpatialQuad", "apply", "compose", "decode_depth", "decode_depth_m",
    "decode_message", "degrade", "encode_depth", "encode_message", "export_ply", "from_anchor_frame",
    "invert", "make_spatial_quad", "pack", "parse", "reconstruct_hologram", "schedule", "serialize",
    "state_digest", "to_anchor_frame", "unpack", "unproject",
]
