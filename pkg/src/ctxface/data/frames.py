def frame_indices(total_frames: int, n: int = 16) -> list[int]:
    """``n`` evenly spaced frame indices including both endpoints."""
    if total_frames < 1:
        raise ValueError(f"total_frames must be >= 1, got {total_frames}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if n == 1:
        return [0]
    # integer arithmetic with round-half-up, so no float rounding surprises
    return [(2 * i * (total_frames - 1) + (n - 1)) // (2 * (n - 1)) for i in range(n)]


def frame_timestamp(frame_index: int, total_frames: int, duration: float) -> float:
    """Centre time in seconds of a stored frame, assuming frames tile the clip evenly."""
    return (frame_index + 0.5) * duration / total_frames
