import numpy as np

from ..evaluation import Detection, iou, score_order


def nms(dets, iou_threshold):
    """Greedy per-class non-maximum suppression; keeps the higher score (lower index on ties)."""
    kept = []
    for idx in score_order([d.score for d in dets]):
        d = dets[idx]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def decode_detections(output, score_threshold=0.05, nms_iou=0.5, image_ids=None,
                      image_size=None):
    """Turn a :class:`GridOutput` into per-image detection lists.

    A cell's score is objectness times its best class probability and its
    class is that argmax; cells scoring at or below ``score_threshold`` are
    dropped. Boxes are clipped to the image.
    """
    probs = output.class_probs
    scores = output.objectness * probs.max(axis=-1)
    classes = probs.argmax(axis=-1)
    boxes = output.boxes()
    n, s = scores.shape[:2]
    size = image_size if image_size is not None else s * output.cell_size
    boxes = np.clip(boxes, 0.0, size)
    if image_ids is None:
        image_ids = range(n)
    result = []
    for i, img in enumerate(image_ids):
        dets = []
        for r in range(s):
            for c in range(s):
                sc = float(scores[i, r, c])
                b = boxes[i, r, c]
                if sc <= score_threshold or b[2] <= b[0] or b[3] <= b[1]:
                    continue
                dets.append(Detection(int(img), int(classes[i, r, c]),
                                      tuple(float(v) for v in b), sc))
        result.append(nms(dets, nms_iou))
    return result
