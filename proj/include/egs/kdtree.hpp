#pragma once

#include <algorithm>
#include <queue>
#include <vector>

#include "egs/common.hpp"

namespace egs {

// Exact k-nearest-neighbour search over 3D points. Ties are resolved by the
// lower point index, matching the exhaustive-scan oracle exactly.
class KdTree {
 public:
  explicit KdTree(std::vector<Vec3> points, int leaf_size = 8)
      : points_(std::move(points)), leaf_(std::max(1, leaf_size)) {
    order_.resize(points_.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    if (!points_.empty()) root_ = build(0, static_cast<int>(points_.size()));
  }

  size_t size() const { return points_.size(); }
  const Vec3& point(int i) const { return points_[i]; }

  // k nearest indices ordered by (squared distance, index).
  std::vector<int> knn(const Vec3& query, int k) const {
    std::vector<int> out;
    if (k <= 0 || points_.empty()) return out;
    const size_t kk = std::min<size_t>(k, points_.size());
    Heap heap;
    search(root_, query, kk, heap);
    out.resize(heap.size());
    for (size_t i = heap.size(); i-- > 0;) {
      out[i] = heap.top().second;
      heap.pop();
    }
    return out;
  }

 private:
  struct Node {
    int axis = -1;       // -1: leaf
    double split = 0.0;
    int begin = 0, end = 0;  // leaf range in order_
    int left = -1, right = -1;
  };

  using Entry = std::pair<double, int>;  // (squared distance, index)
  struct WorseFirst {
    bool operator()(const Entry& a, const Entry& b) const { return a < b; }
  };
  using Heap = std::priority_queue<Entry, std::vector<Entry>, WorseFirst>;

  int build(int begin, int end) {
    Node node;
    if (end - begin <= leaf_) {
      node.begin = begin;
      node.end = end;
      nodes_.push_back(node);
      return static_cast<int>(nodes_.size()) - 1;
    }
    Aabb box;
    for (int i = begin; i < end; ++i) box.expand(points_[order_[i]]);
    const Vec3 ext = box.extent();
    int axis = 0;
    if (ext[1] > ext[axis]) axis = 1;
    if (ext[2] > ext[axis]) axis = 2;
    const int mid = (begin + end) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](int a, int b) {
                       if (points_[a][axis] != points_[b][axis]) return points_[a][axis] < points_[b][axis];
                       return a < b;
                     });
    node.axis = axis;
    node.split = points_[order_[mid]][axis];
    const int self = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    const int l = build(begin, mid);
    const int r = build(mid, end);
    nodes_[self].left = l;
    nodes_[self].right = r;
    return self;
  }

  void consider(const Vec3& query, int idx, size_t k, Heap& heap) const {
    const double d2 = (points_[idx] - query).squaredNorm();
    const Entry e{d2, idx};
    if (heap.size() < k) {
      heap.push(e);
    } else if (e < heap.top()) {
      heap.pop();
      heap.push(e);
    }
  }

  void search(int ni, const Vec3& query, size_t k, Heap& heap) const {
    const Node& node = nodes_[ni];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) consider(query, order_[i], k, heap);
      return;
    }
    const double delta = query[node.axis] - node.split;
    const int near = delta < 0.0 ? node.left : node.right;
    const int far = delta < 0.0 ? node.right : node.left;
    search(near, query, k, heap);
    // Visit the far side unless it provably cannot improve on the current
    // worst; equality must still be visited for index tie-breaks.
    if (heap.size() < k || delta * delta <= heap.top().first) search(far, query, k, heap);
  }

  std::vector<Vec3> points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int leaf_;
  int root_ = -1;
};

}  // namespace egs
