"""Rotated IoU, standing boxes and NMS on a few pedestrian-sized boxes."""
import numpy as np

from pedcast.geometry import iou_matrix, nms, standing_boxes

boxes = np.array([
    [0.0, 0.0, 0.7, 0.9, 0.0],
    [0.1, 0.0, 0.7, 0.9, 0.3],
    [0.0, 0.0, 0.7, 0.9, np.pi / 2],
    [3.0, 1.0, 0.7, 0.9, 1.0],
])
scores = np.array([0.9, 0.8, 0.7, 0.6])
np.set_printoptions(precision=3, suppress=True)
print("pairwise IoU:\n", iou_matrix(boxes, boxes))
print("standing boxes [x_min, y_min, x_max, y_max]:\n", standing_boxes(boxes))
print("kept after NMS at 0.5:", nms(boxes, scores, 0.5))
