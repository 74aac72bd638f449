#pragma once
#include <algorithm>
#include <cstdint>
#include <vector>

#include "scenediff/error.hpp"
#include "scenediff/linalg.hpp"

namespace sde {

// Exact nearest-neighbor index over 3-D points. Distances are computed in
// double with the same expression a brute-force scan would use, and ties
// resolve to the lowest original index, so results are bit-identical to the
// O(n^2) oracle.
class KdTree3 {
 public:
  struct Hit {
    double d2 = 0;
    int32_t idx = -1;
  };

  explicit KdTree3(std::vector<Vec3> points) : pts_(std::move(points)) {
    require(!pts_.empty(), ErrorCode::invalid_argument, "kdtree: empty point set");
    order_.resize(pts_.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = int32_t(i);
    nodes_.reserve(pts_.size() * 2);
    root_ = build(0, int32_t(pts_.size()));
  }

  Hit nearest(const Vec3& q) const {
    Hit best;
    best.d2 = std::numeric_limits<double>::infinity();
    search(root_, q, best);
    return best;
  }

  static double dist2(const Vec3& a, const Vec3& b) {
    double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
    return dx * dx + dy * dy + dz * dz;
  }

 private:
  struct Node {
    int32_t point = -1;  // index into pts_
    int32_t left = -1, right = -1;
    uint8_t axis = 0;
  };

  int32_t build(int32_t lo, int32_t hi) {
    if (lo >= hi) return -1;
    // Split along the widest extent of this subset.
    Vec3 mn = pts_[size_t(order_[size_t(lo)])], mx = mn;
    for (int32_t i = lo; i < hi; ++i) {
      const Vec3& p = pts_[size_t(order_[size_t(i)])];
      mn = {std::min(mn.x, p.x), std::min(mn.y, p.y), std::min(mn.z, p.z)};
      mx = {std::max(mx.x, p.x), std::max(mx.y, p.y), std::max(mx.z, p.z)};
    }
    Vec3 ext = mx - mn;
    uint8_t axis = 0;
    if (ext.y > ext.x) axis = 1;
    if (ext.z > (axis == 0 ? ext.x : ext.y)) axis = 2;
    int32_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + lo, order_.begin() + mid, order_.begin() + hi,
                     [&](int32_t a, int32_t b) {
                       double ca = pts_[size_t(a)][axis], cb = pts_[size_t(b)][axis];
                       return ca < cb || (ca == cb && a < b);
                     });
    Node n;
    n.point = order_[size_t(mid)];
    n.axis = axis;
    int32_t self = int32_t(nodes_.size());
    nodes_.push_back(n);
    int32_t l = build(lo, mid);
    int32_t r = build(mid + 1, hi);
    nodes_[size_t(self)].left = l;
    nodes_[size_t(self)].right = r;
    return self;
  }

  void search(int32_t ni, const Vec3& q, Hit& best) const {
    if (ni < 0) return;
    const Node& n = nodes_[size_t(ni)];
    const Vec3& p = pts_[size_t(n.point)];
    double d2 = dist2(q, p);
    if (d2 < best.d2 || (d2 == best.d2 && n.point < best.idx)) {
      best.d2 = d2;
      best.idx = n.point;
    }
    double diff = q[n.axis] - p[n.axis];
    int32_t near = diff < 0 ? n.left : n.right;
    int32_t far = diff < 0 ? n.right : n.left;
    search(near, q, best);
    // <= keeps equal-distance candidates reachable for the index tie-break.
    if (diff * diff <= best.d2) search(far, q, best);
  }

  std::vector<Vec3> pts_;
  std::vector<int32_t> order_;
  std::vector<Node> nodes_;
  int32_t root_ = -1;
};

}  // namespace sde
