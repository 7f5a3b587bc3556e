//! Plane/space geometry oracle (placeholder).
