#pragma once

#include <algorithm>
#include <cstdint>

namespace vfm4sdg {

using ImageId = std::int64_t;
using CategoryId = std::int64_t;

// Axis-aligned box, top-left origin, image pixels.
struct Box {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double area() const noexcept { return w * h; }
    double right() const noexcept { return x + w; }
    double bottom() const noexcept { return y + h; }

    friend bool operator==(const Box&, const Box&) = default;
};

struct BoxAnnotation {
    ImageId image_id = 0;
    Box bbox;
    CategoryId category_id = 0;

    friend bool operator==(const BoxAnnotation&, const BoxAnnotation&) = default;
};

struct Detection {
    ImageId image_id = 0;
    Box bbox;
    CategoryId category_id = 0;
    double score = 0.0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

inline double iou(const Box& a, const Box& b) {
    const double iw = std::min(a.right(), b.right()) - std::max(a.x, b.x);
    const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace vfm4sdg
