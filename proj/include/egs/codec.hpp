#pragma once

// Temporal encoding of an evolving Gaussian sequence: per-frame differential
// chunks (reference pose residuals, extension differentials against
// ancestors), uniform quantization and a range-coded entropy layer inside a
// little-endian container. Encoding is closed-loop: residuals are computed
// against the decoder-side reconstruction, so encoder and decoder states are
// bit-identical after every frame (CRC-enforced).

#include <filesystem>
#include <fstream>
#include <span>
#include <unordered_set>
#include <vector>

#include "egs/bytes.hpp"
#include "egs/core.hpp"
#include "egs/deform.hpp"
#include "egs/rangecoder.hpp"

namespace egs {

// ---------------------------------------------------------------------------
// Quantization.

struct QuantParams {
  int bits = 16;
  double step = 2e-4;
  double zero_point = 0.0;

  int32_t max_symbol() const { return (1 << (bits - 1)) - 1; }
};

inline int32_t quantize(double x, const QuantParams& q) {
  const double scaled = (x - q.zero_point) / q.step;
  const int32_t limit = q.max_symbol();
  if (scaled >= static_cast<double>(limit)) return limit;
  if (scaled <= static_cast<double>(-limit)) return -limit;
  return static_cast<int32_t>(std::llround(scaled));
}

inline double dequantize(int32_t symbol, const QuantParams& q) {
  return q.zero_point + static_cast<double>(symbol) * q.step;
}

// Stream-wide quantizer configuration (the residual-domain steps).
struct QuantSpec {
  QuantParams mean{16, 2e-4, 0.0};
  QuantParams rotation{16, 2e-4, 0.0};  // axis-angle components
  QuantParams log_scale{16, 2e-4, 0.0};
  QuantParams opacity{16, 2e-4, 0.0};
  QuantParams sh0{10, 1e-3, 0.0};
  int sh_rest_bits = 6;  // per-chunk power-of-two step

  void validate() const {
    for (const QuantParams* q : {&mean, &rotation, &log_scale, &opacity, &sh0})
      if (!(q->step > 0.0) || q->bits < 2 || q->bits > 30)
        throw InvalidParameter("QuantSpec: bad group parameters");
    if (sh_rest_bits < 2 || sh_rest_bits > 16) throw InvalidParameter("QuantSpec: bad sh_rest bits");
  }
};

// Power-of-two step exponent covering |x| <= max_abs with the given signed
// bit width; idempotent under re-quantization of the decoded lattice.
inline int pow2_step_exponent(double max_abs, int bits) {
  if (!(max_abs > 0.0)) return -60;
  const int32_t limit = (1 << (bits - 1)) - 1;
  int e = 0;
  const double m = std::frexp(max_abs / static_cast<double>(limit), &e);
  int k = (m == 0.5) ? e - 1 : e;  // smallest power of two >= max_abs / limit
  if (k < -60) k = -60;
  return k;
}

// ---------------------------------------------------------------------------
// Rotation transport domain.

// Axis-angle (axis * angle, radians) of a canonical unit quaternion
// (w >= 0 => angle in [0, pi]). Small angles use the series form.
inline Vec3 quat_to_axis_angle(const Quat& q) {
  const double nv = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
  if (nv < 1e-12) return Vec3::Zero();
  const double angle = 2.0 * std::atan2(nv, q.w);
  return Vec3(q.x, q.y, q.z) * (angle / nv);
}

inline Quat axis_angle_to_quat(const Vec3& aa) {
  const double angle = aa.norm();
  if (angle < 1e-12) {
    // sin(a/2)/a -> 1/2 as a -> 0.
    return Quat{1.0, 0.5 * aa.x(), 0.5 * aa.y(), 0.5 * aa.z()};
  }
  const double h = 0.5 * angle;
  const double s = std::sin(h) / angle;
  return Quat{std::cos(h), aa.x() * s, aa.y() * s, aa.z() * s};
}

// ---------------------------------------------------------------------------
// Chunks and container.

enum class ChunkType : uint8_t { Intra = 0, Predicted = 1 };

struct FrameChunk {
  ChunkType type = ChunkType::Intra;
  uint32_t frame_index = 0;
  std::vector<uint8_t> payload;  // includes the trailing CRC of the decoded state

  size_t size_bytes() const { return payload.size() + 9; }
};

struct StreamHeader {
  uint8_t version = 1;
  uint8_t sh_degree = 0;
  uint32_t frame_count = 0;
  uint32_t intra_interval = 0;  // 0: frame 0 only
  QuantSpec spec;
};

struct EvolvingStream {
  StreamHeader header;
  std::vector<FrameChunk> chunks;

  void write(const std::filesystem::path& path) const;
  static EvolvingStream read(const std::filesystem::path& path);
};

// Warp parameters carried in a predicted chunk so decoding re-derives the
// deformation without the optimizer: node sampling is reproducible from
// (seed, M, K) on the decoded previous frame.
struct WarpParams {
  uint64_t seed = 0;
  int node_count = 0;
  int k_point = 4;
  std::vector<Quat> rotations;     // per node
  std::vector<Vec3> translations;  // per node
};

namespace codec_detail {

// Canonical serialization of a decoded frame ("decoded-feature byte image")
// for the closed-loop checksum.
inline std::vector<uint8_t> serialize_features(const GaussianFrame& frame) {
  ByteWriter w;
  w.u32(static_cast<uint32_t>(frame.points.size()));
  for (const auto& p : frame.points) {
    w.u64(p.id);
    for (int c = 0; c < 3; ++c) w.f64(p.pose.mean[c]);
    w.f64(p.pose.rotation.w);
    w.f64(p.pose.rotation.x);
    w.f64(p.pose.rotation.y);
    w.f64(p.pose.rotation.z);
    for (int c = 0; c < 3; ++c) w.f64(p.appearance.log_scale[c]);
    w.f64(p.appearance.opacity_logit);
    w.u8(static_cast<uint8_t>(p.appearance.sh.degree));
    for (double c : p.appearance.sh.coeffs) w.f64(c);
    w.u8(static_cast<uint8_t>(p.cls));
    w.u64(p.cls == PointClass::Extension ? p.ancestor_id : 0);
    w.u32(static_cast<uint32_t>(p.birth_frame));
  }
  return std::move(w.bytes);
}

inline uint32_t frame_crc(const GaussianFrame& frame) {
  const auto bytes = serialize_features(frame);
  return crc32(bytes);
}

inline void write_id_list(ByteWriter& w, const std::vector<uint64_t>& sorted_ids) {
  w.varint(sorted_ids.size());
  uint64_t prev = 0;
  for (uint64_t id : sorted_ids) {
    w.varint(id - prev);
    prev = id;
  }
}

inline std::vector<uint64_t> read_id_list(ByteReader& r) {
  const uint64_t n = r.varint();
  std::vector<uint64_t> ids(n);
  uint64_t prev = 0;
  for (auto& id : ids) {
    prev += r.varint();
    id = prev;
  }
  return ids;
}

// Deterministic re-warp shared by encoder and decoder.
inline GaussianFrame apply_chunk_warp(const GaussianFrame& base, const WarpParams& warp) {
  if (warp.node_count <= 0 || base.points.empty()) return base;
  DeformationGraph graph = sample_control_nodes(base, warp.node_count, warp.seed);
  if (graph.nodes.size() != warp.rotations.size())
    throw CorruptChunk("warp block: node count mismatch");
  for (size_t j = 0; j < graph.nodes.size(); ++j) {
    graph.nodes[j].rotation = warp.rotations[j];
    graph.nodes[j].translation = warp.translations[j];
  }
  bind_weights(graph, base, warp.k_point, 6);
  return warp_frame(graph, base);
}

}  // namespace codec_detail

// ---------------------------------------------------------------------------
// Intra chunk: self-contained frame, every feature group quantized with a
// per-chunk power-of-two step at 16 bits and entropy coded.

struct EncodeResult {
  FrameChunk chunk;
  GaussianFrame decoded;  // closed-loop reconstruction
};

inline EncodeResult encode_intra(const GaussianFrame& frame, const QuantSpec& spec) {
  spec.validate();
  ByteWriter w;
  w.varint(frame.points.size());
  const int degree = frame.points.empty() ? 0 : frame.points.front().appearance.sh.degree;
  w.u8(static_cast<uint8_t>(degree));

  EncodeResult result;
  result.chunk.type = ChunkType::Intra;
  result.chunk.frame_index = static_cast<uint32_t>(frame.frame_index);
  result.decoded.frame_index = frame.frame_index;

  std::vector<uint64_t> ids;
  for (const auto& p : frame.points) {
    if (p.appearance.sh.degree != degree) throw InvalidInput("encode_intra: mixed SH degrees");
    ids.push_back(p.id);
  }
  codec_detail::write_id_list(w, ids);
  for (const auto& p : frame.points) {
    w.varint(static_cast<uint64_t>(p.birth_frame));
    w.u8(static_cast<uint8_t>(p.cls));
    if (p.cls == PointClass::Extension) w.varint(p.ancestor_id);
  }

  // Gather per-group values in canonical order.
  const int rest = sh_coeffs_per_channel(degree) - 1;
  std::vector<double> mean, rot_aa, scale, opacity, sh0, sh_rest;
  for (const auto& p : frame.points) {
    for (int c = 0; c < 3; ++c) mean.push_back(p.pose.mean[c]);
    const Vec3 aa = quat_to_axis_angle(normalize_rotation(p.pose.rotation));
    for (int c = 0; c < 3; ++c) rot_aa.push_back(aa[c]);
    for (int c = 0; c < 3; ++c) scale.push_back(p.appearance.log_scale[c]);
    opacity.push_back(p.appearance.opacity_logit);
    for (int ch = 0; ch < 3; ++ch) sh0.push_back(p.appearance.sh.at(ch, 0));
    for (int ch = 0; ch < 3; ++ch)
      for (int k = 1; k <= rest; ++k) sh_rest.push_back(p.appearance.sh.at(ch, k));
  }

  std::vector<std::vector<double>*> groups{&mean, &rot_aa, &scale, &opacity, &sh0, &sh_rest};
  std::vector<std::vector<int32_t>> symbols(groups.size());
  for (size_t g = 0; g < groups.size(); ++g) {
    double max_abs = 0.0;
    for (double v : *groups[g]) max_abs = std::max(max_abs, std::abs(v));
    const int exponent = pow2_step_exponent(max_abs, 16);
    QuantParams qp{16, std::ldexp(1.0, exponent), 0.0};
    w.svarint(exponent);
    symbols[g].reserve(groups[g]->size());
    for (double& v : *groups[g]) {
      const int32_t s = quantize(v, qp);
      symbols[g].push_back(s);
      v = dequantize(s, qp);  // groups now hold the decoded values
    }
    entropy_encode(symbols[g], w);
  }

  // Reassemble the decoded frame from the dequantized groups.
  size_t im = 0, ir = 0, is = 0, io = 0, i0 = 0, ih = 0;
  for (const auto& src : frame.points) {
    GaussianPoint p = src;
    for (int c = 0; c < 3; ++c) p.pose.mean[c] = mean[im++];
    Vec3 aa;
    for (int c = 0; c < 3; ++c) aa[c] = rot_aa[ir++];
    p.pose.rotation = axis_angle_to_quat(aa);
    for (int c = 0; c < 3; ++c) p.appearance.log_scale[c] = scale[is++];
    p.appearance.opacity_logit = opacity[io++];
    for (int ch = 0; ch < 3; ++ch) p.appearance.sh.at(ch, 0) = sh0[i0++];
    for (int ch = 0; ch < 3; ++ch)
      for (int k = 1; k <= rest; ++k) p.appearance.sh.at(ch, k) = sh_rest[ih++];
    result.decoded.points.push_back(std::move(p));
  }
  result.decoded.recompute_bbox();

  w.u32(codec_detail::frame_crc(result.decoded));
  result.chunk.payload = std::move(w.bytes);
  return result;
}

inline GaussianFrame decode_intra(const FrameChunk& chunk) {
  if (chunk.type != ChunkType::Intra) throw CorruptChunk("decode_intra: wrong chunk type");
  ByteReader r(chunk.payload);
  const uint64_t count = r.varint();
  const int degree = r.u8();
  if (degree < 0 || degree > kMaxShDegree) throw CorruptChunk("decode_intra: bad SH degree");

  GaussianFrame frame;
  frame.frame_index = static_cast<int32_t>(chunk.frame_index);
  const auto ids = codec_detail::read_id_list(r);
  if (ids.size() != count) throw CorruptChunk("decode_intra: id list mismatch");
  frame.points.resize(count);
  for (size_t i = 0; i < count; ++i) {
    frame.points[i].id = ids[i];
    frame.points[i].birth_frame = static_cast<int32_t>(r.varint());
    frame.points[i].cls = static_cast<PointClass>(r.u8());
    if (frame.points[i].cls == PointClass::Extension) frame.points[i].ancestor_id = r.varint();
    frame.points[i].appearance.sh = SHCoeffs(degree);
  }

  const int rest = sh_coeffs_per_channel(degree) - 1;
  const std::vector<size_t> expect{count * 3, count * 3, count * 3, count, count * 3,
                                   count * static_cast<size_t>(3 * rest)};
  std::vector<std::vector<double>> groups(6);
  for (size_t g = 0; g < 6; ++g) {
    const int exponent = static_cast<int>(r.svarint());
    QuantParams qp{16, std::ldexp(1.0, exponent), 0.0};
    const auto symbols = entropy_decode(r);
    if (symbols.size() != expect[g]) throw CorruptChunk("decode_intra: group size mismatch");
    groups[g].reserve(symbols.size());
    for (int32_t s : symbols) groups[g].push_back(dequantize(s, qp));
  }

  size_t im = 0, ir = 0, is = 0, io = 0, i0 = 0, ih = 0;
  for (auto& p : frame.points) {
    for (int c = 0; c < 3; ++c) p.pose.mean[c] = groups[0][im++];
    Vec3 aa;
    for (int c = 0; c < 3; ++c) aa[c] = groups[1][ir++];
    p.pose.rotation = axis_angle_to_quat(aa);
    for (int c = 0; c < 3; ++c) p.appearance.log_scale[c] = groups[2][is++];
    p.appearance.opacity_logit = groups[3][io++];
    for (int ch = 0; ch < 3; ++ch) p.appearance.sh.at(ch, 0) = groups[4][i0++];
    for (int ch = 0; ch < 3; ++ch)
      for (int k = 1; k <= rest; ++k) p.appearance.sh.at(ch, k) = groups[5][ih++];
  }
  frame.recompute_bbox();
  const uint32_t crc = r.u32();
  if (crc != codec_detail::frame_crc(frame)) throw CorruptChunk("decode_intra: checksum mismatch");
  return frame;
}

// ---------------------------------------------------------------------------
// Predicted chunk.

inline EncodeResult encode_frame(const GaussianFrame& prev_decoded, const GaussianFrame& cur,
                                 const std::vector<uint64_t>& removed_ids, const QuantSpec& spec,
                                 const WarpParams* warp = nullptr) {
  spec.validate();
  ByteWriter w;

  // Removals.
  std::vector<uint64_t> removals = removed_ids;
  std::sort(removals.begin(), removals.end());
  std::unordered_set<uint64_t> removed_set(removals.begin(), removals.end());
  for (uint64_t id : removals)
    if (!prev_decoded.find(id)) throw CorruptChunk("encode_frame: removal of unknown id");

  GaussianFrame base;
  base.frame_index = cur.frame_index;
  for (const auto& p : prev_decoded.points) {
    if (removed_set.count(p.id)) continue;
    base.points.push_back(p);
    base.points.back().cls = PointClass::Reference;  // inherited through the warp
  }
  base.recompute_bbox();

  // Warp block.
  WarpParams effective;
  if (warp && warp->node_count > 0) {
    effective = *warp;
    effective.node_count = static_cast<int>(
        std::min<size_t>(static_cast<size_t>(warp->node_count), base.points.size()));
    if (effective.rotations.size() != static_cast<size_t>(effective.node_count) ||
        effective.translations.size() != static_cast<size_t>(effective.node_count))
      throw InvalidParameter("encode_frame: warp parameter arrays do not match node count");
  }
  w.varint(static_cast<uint64_t>(effective.node_count));
  std::vector<int32_t> node_aa_sym, node_t_sym;
  if (effective.node_count > 0) {
    w.u64(effective.seed);
    w.u8(static_cast<uint8_t>(effective.k_point));
    for (int j = 0; j < effective.node_count; ++j) {
      const Vec3 aa = quat_to_axis_angle(normalize_rotation(effective.rotations[j]));
      for (int c = 0; c < 3; ++c) node_aa_sym.push_back(quantize(aa[c], spec.rotation));
      for (int c = 0; c < 3; ++c) node_t_sym.push_back(quantize(effective.translations[j][c], spec.mean));
    }
    entropy_encode(node_aa_sym, w);
    entropy_encode(node_t_sym, w);
    // Replace with the dequantized values for the closed-loop warp.
    for (int j = 0; j < effective.node_count; ++j) {
      Vec3 aa;
      for (int c = 0; c < 3; ++c) aa[c] = dequantize(node_aa_sym[j * 3 + c], spec.rotation);
      effective.rotations[j] = axis_angle_to_quat(aa);
      for (int c = 0; c < 3; ++c)
        effective.translations[j][c] = dequantize(node_t_sym[j * 3 + c], spec.mean);
    }
  }
  codec_detail::write_id_list(w, removals);

  const GaussianFrame warped = codec_detail::apply_chunk_warp(base, effective);

  // The current frame must contain exactly the surviving ids as its
  // inherited points; everything born this frame is an extension record.
  std::vector<const GaussianPoint*> ext_points;
  size_t inherited = 0;
  for (const auto& p : cur.points) {
    if (p.birth_frame == cur.frame_index && p.cls == PointClass::Extension)
      ext_points.push_back(&p);
    else
      ++inherited;
  }
  if (inherited != warped.points.size())
    throw CorruptChunk("encode_frame: inherited point set does not match the decoded state");

  EncodeResult result;
  result.chunk.type = ChunkType::Predicted;
  result.chunk.frame_index = static_cast<uint32_t>(cur.frame_index);
  result.decoded.frame_index = cur.frame_index;

  // Reference residuals in canonical id order.
  std::vector<int32_t> ref_dmean, ref_daa;
  for (const auto& wp : warped.points) {
    const GaussianPoint* cp = cur.find(wp.id);
    if (!cp || cp->birth_frame == cur.frame_index)
      throw CorruptChunk("encode_frame: id mismatch between prev state and current frame");
    GaussianPoint decoded = wp;
    for (int c = 0; c < 3; ++c) {
      const int32_t s = quantize(cp->pose.mean[c] - wp.pose.mean[c], spec.mean);
      ref_dmean.push_back(s);
      decoded.pose.mean[c] = wp.pose.mean[c] + dequantize(s, spec.mean);
    }
    const Vec3 warped_aa = quat_to_axis_angle(normalize_rotation(wp.pose.rotation));
    const Vec3 cur_aa = quat_to_axis_angle(normalize_rotation(cp->pose.rotation));
    Vec3 aa;
    for (int c = 0; c < 3; ++c) {
      const int32_t s = quantize(cur_aa[c] - warped_aa[c], spec.rotation);
      ref_daa.push_back(s);
      aa[c] = warped_aa[c] + dequantize(s, spec.rotation);
    }
    decoded.pose.rotation = axis_angle_to_quat(aa);
    decoded.birth_frame = cp->birth_frame;
    result.decoded.points.push_back(std::move(decoded));
  }
  entropy_encode(ref_dmean, w);
  entropy_encode(ref_daa, w);

  // Extension records.
  w.varint(ext_points.size());
  int degree = 0;
  for (const auto* p : ext_points) degree = std::max(degree, p->appearance.sh.degree);
  const int rest = sh_coeffs_per_channel(degree) - 1;

  // Pass 1: the per-chunk SH band >= 1 step needs the differential range up
  // front. Raw-value diffs are an adequate bound; chained quantization shifts
  // stay within the clamp.
  double shrest_max = 0.0;
  for (const auto* p : ext_points) {
    const GaussianPoint* anc = result.decoded.find(p->ancestor_id);
    const GaussianPoint* anc_raw = anc ? anc : cur.find(p->ancestor_id);
    if (!anc_raw) throw CorruptChunk("encode_frame: extension ancestor not found");
    for (int ch = 0; ch < 3; ++ch)
      for (int k = 1; k <= rest; ++k) {
        const double anc_v = anc_raw->appearance.sh.degree >= 1 ? anc_raw->appearance.sh.at(ch, k) : 0.0;
        shrest_max = std::max(shrest_max, std::abs(p->appearance.sh.at(ch, k) - anc_v));
      }
  }
  const int shrest_exp = pow2_step_exponent(shrest_max, spec.sh_rest_bits);
  const QuantParams shrest_qp{spec.sh_rest_bits, std::ldexp(1.0, shrest_exp), 0.0};

  // Pass 2: sequential closed-loop quantization; each record's baseline is
  // the *decoded* ancestor, so chained lineages decode exactly.
  std::vector<int32_t> ext_dmean, ext_daa, ext_dscale, ext_dop, ext_dsh0, ext_dshrest;
  uint64_t prev_id = 0;
  for (const auto* p : ext_points) {
    w.varint(p->id - prev_id);
    prev_id = p->id;
    w.varint(p->ancestor_id);
    const GaussianPoint* anc = result.decoded.find(p->ancestor_id);
    if (!anc) throw CorruptChunk("encode_frame: extension ancestor not in decoded state");

    GaussianPoint decoded = *anc;
    decoded.id = p->id;
    decoded.cls = PointClass::Extension;
    decoded.ancestor_id = p->ancestor_id;
    decoded.birth_frame = cur.frame_index;
    decoded.appearance.sh = SHCoeffs(p->appearance.sh.degree);

    for (int c = 0; c < 3; ++c) {
      const int32_t s = quantize(p->pose.mean[c] - anc->pose.mean[c], spec.mean);
      ext_dmean.push_back(s);
      decoded.pose.mean[c] = anc->pose.mean[c] + dequantize(s, spec.mean);
    }
    const Vec3 anc_aa = quat_to_axis_angle(normalize_rotation(anc->pose.rotation));
    const Vec3 cur_aa = quat_to_axis_angle(normalize_rotation(p->pose.rotation));
    Vec3 aa;
    for (int c = 0; c < 3; ++c) {
      const int32_t s = quantize(cur_aa[c] - anc_aa[c], spec.rotation);
      ext_daa.push_back(s);
      aa[c] = anc_aa[c] + dequantize(s, spec.rotation);
    }
    decoded.pose.rotation = axis_angle_to_quat(aa);
    for (int c = 0; c < 3; ++c) {
      const int32_t s = quantize(p->appearance.log_scale[c] - anc->appearance.log_scale[c], spec.log_scale);
      ext_dscale.push_back(s);
      decoded.appearance.log_scale[c] = anc->appearance.log_scale[c] + dequantize(s, spec.log_scale);
    }
    {
      const int32_t s = quantize(p->appearance.opacity_logit - anc->appearance.opacity_logit, spec.opacity);
      ext_dop.push_back(s);
      decoded.appearance.opacity_logit = anc->appearance.opacity_logit + dequantize(s, spec.opacity);
    }
    for (int ch = 0; ch < 3; ++ch) {
      const int32_t s = quantize(p->appearance.sh.at(ch, 0) - anc->appearance.sh.at(ch, 0), spec.sh0);
      ext_dsh0.push_back(s);
      decoded.appearance.sh.at(ch, 0) = anc->appearance.sh.at(ch, 0) + dequantize(s, spec.sh0);
    }
    const int pr = decoded.appearance.sh.per_channel() - 1;
    for (int ch = 0; ch < 3; ++ch)
      for (int k = 1; k <= rest; ++k) {
        const double anc_v = anc->appearance.sh.degree >= 1 ? anc->appearance.sh.at(ch, k) : 0.0;
        const int32_t s = quantize(p->appearance.sh.at(ch, k) - anc_v, shrest_qp);
        ext_dshrest.push_back(s);
        if (k <= pr) decoded.appearance.sh.at(ch, k) = anc_v + dequantize(s, shrest_qp);
      }
    // Fresh ids exceed every id already present, so order is preserved.
    if (!result.decoded.points.empty() && decoded.id <= result.decoded.points.back().id)
      throw CorruptChunk("encode_frame: extension ids must exceed inherited ids");
    result.decoded.points.push_back(std::move(decoded));
  }

  if (!ext_points.empty()) {
    w.u8(static_cast<uint8_t>(degree));
    w.svarint(shrest_exp);
  }
  entropy_encode(ext_dmean, w);
  entropy_encode(ext_daa, w);
  entropy_encode(ext_dscale, w);
  entropy_encode(ext_dop, w);
  entropy_encode(ext_dsh0, w);
  entropy_encode(ext_dshrest, w);
  result.decoded.sort_by_id();
  result.decoded.recompute_bbox();

  w.u32(codec_detail::frame_crc(result.decoded));
  result.chunk.payload = std::move(w.bytes);
  return result;
}

inline GaussianFrame decode_frame(const GaussianFrame& prev_decoded, const FrameChunk& chunk,
                                  const QuantSpec& spec) {
  if (chunk.type != ChunkType::Predicted) throw CorruptChunk("decode_frame: wrong chunk type");
  ByteReader r(chunk.payload);

  WarpParams warp;
  warp.node_count = static_cast<int>(r.varint());
  std::vector<int32_t> node_aa_sym, node_t_sym;
  if (warp.node_count > 0) {
    warp.seed = r.u64();
    warp.k_point = r.u8();
    node_aa_sym = entropy_decode(r);
    node_t_sym = entropy_decode(r);
    if (node_aa_sym.size() != static_cast<size_t>(warp.node_count) * 3 ||
        node_t_sym.size() != static_cast<size_t>(warp.node_count) * 3)
      throw CorruptChunk("decode_frame: warp stream size mismatch");
    warp.rotations.resize(warp.node_count);
    warp.translations.resize(warp.node_count);
    for (int j = 0; j < warp.node_count; ++j) {
      Vec3 aa;
      for (int c = 0; c < 3; ++c) aa[c] = dequantize(node_aa_sym[j * 3 + c], spec.rotation);
      warp.rotations[j] = axis_angle_to_quat(aa);
      for (int c = 0; c < 3; ++c) warp.translations[j][c] = dequantize(node_t_sym[j * 3 + c], spec.mean);
    }
  }

  const auto removals = codec_detail::read_id_list(r);
  std::unordered_set<uint64_t> removed_set(removals.begin(), removals.end());
  GaussianFrame base;
  base.frame_index = static_cast<int32_t>(chunk.frame_index);
  for (const auto& p : prev_decoded.points) {
    if (removed_set.count(p.id)) continue;
    base.points.push_back(p);
    base.points.back().cls = PointClass::Reference;
  }
  base.recompute_bbox();

  GaussianFrame out = codec_detail::apply_chunk_warp(base, warp);
  out.frame_index = static_cast<int32_t>(chunk.frame_index);

  const auto ref_dmean = entropy_decode(r);
  const auto ref_daa = entropy_decode(r);
  if (ref_dmean.size() != out.points.size() * 3 || ref_daa.size() != out.points.size() * 3)
    throw CorruptChunk("decode_frame: reference stream size mismatch");
  for (size_t i = 0; i < out.points.size(); ++i) {
    GaussianPoint& p = out.points[i];
    for (int c = 0; c < 3; ++c) p.pose.mean[c] += dequantize(ref_dmean[i * 3 + c], spec.mean);
    const Vec3 warped_aa = quat_to_axis_angle(normalize_rotation(p.pose.rotation));
    Vec3 aa;
    for (int c = 0; c < 3; ++c) aa[c] = warped_aa[c] + dequantize(ref_daa[i * 3 + c], spec.rotation);
    p.pose.rotation = axis_angle_to_quat(aa);
  }

  const uint64_t ext_count = r.varint();
  std::vector<uint64_t> ext_ids(ext_count), ext_anc(ext_count);
  uint64_t prev_id = 0;
  for (uint64_t e = 0; e < ext_count; ++e) {
    prev_id += r.varint();
    ext_ids[e] = prev_id;
    ext_anc[e] = r.varint();
  }
  int degree = 0;
  QuantParams shrest_qp{spec.sh_rest_bits, 1.0, 0.0};
  if (ext_count > 0) {
    degree = r.u8();
    if (degree < 0 || degree > kMaxShDegree) throw CorruptChunk("decode_frame: bad SH degree");
    shrest_qp.step = std::ldexp(1.0, static_cast<int>(r.svarint()));
  }
  const int rest = sh_coeffs_per_channel(degree) - 1;
  const auto ext_dmean = entropy_decode(r);
  const auto ext_daa = entropy_decode(r);
  const auto ext_dscale = entropy_decode(r);
  const auto ext_dop = entropy_decode(r);
  const auto ext_dsh0 = entropy_decode(r);
  const auto ext_dshrest = entropy_decode(r);
  if (ext_dmean.size() != ext_count * 3 || ext_daa.size() != ext_count * 3 ||
      ext_dscale.size() != ext_count * 3 || ext_dop.size() != ext_count ||
      ext_dsh0.size() != ext_count * 3 || ext_dshrest.size() != ext_count * static_cast<size_t>(3 * rest))
    throw CorruptChunk("decode_frame: extension stream size mismatch");

  for (uint64_t e = 0; e < ext_count; ++e) {
    const GaussianPoint* anc = out.find(ext_anc[e]);
    if (!anc) throw CorruptChunk("decode_frame: unknown ancestor id");
    GaussianPoint p = *anc;
    p.id = ext_ids[e];
    p.cls = PointClass::Extension;
    p.ancestor_id = ext_anc[e];
    p.birth_frame = static_cast<int32_t>(chunk.frame_index);
    p.appearance.sh = SHCoeffs(degree);
    for (int c = 0; c < 3; ++c) p.pose.mean[c] = anc->pose.mean[c] + dequantize(ext_dmean[e * 3 + c], spec.mean);
    const Vec3 anc_aa = quat_to_axis_angle(normalize_rotation(anc->pose.rotation));
    Vec3 aa;
    for (int c = 0; c < 3; ++c) aa[c] = anc_aa[c] + dequantize(ext_daa[e * 3 + c], spec.rotation);
    p.pose.rotation = axis_angle_to_quat(aa);
    for (int c = 0; c < 3; ++c)
      p.appearance.log_scale[c] = anc->appearance.log_scale[c] + dequantize(ext_dscale[e * 3 + c], spec.log_scale);
    p.appearance.opacity_logit = anc->appearance.opacity_logit + dequantize(ext_dop[e], spec.opacity);
    for (int ch = 0; ch < 3; ++ch)
      p.appearance.sh.at(ch, 0) = anc->appearance.sh.at(ch, 0) + dequantize(ext_dsh0[e * 3 + ch], spec.sh0);
    for (int ch = 0; ch < 3; ++ch)
      for (int k = 1; k <= rest; ++k) {
        const double anc_v = anc->appearance.sh.degree >= 1 ? anc->appearance.sh.at(ch, k) : 0.0;
        p.appearance.sh.at(ch, k) = anc_v + dequantize(ext_dshrest[(e * 3 + ch) * rest + (k - 1)], shrest_qp);
      }
    // Extension ids are allocated after every inherited id, so appending
    // preserves canonical order (and keeps ancestor lookups valid).
    if (!out.points.empty() && p.id <= out.points.back().id)
      throw CorruptChunk("decode_frame: extension ids out of order");
    out.points.push_back(std::move(p));
  }
  out.recompute_bbox();

  const uint32_t crc = r.u32();
  if (crc != codec_detail::frame_crc(out)) throw CorruptChunk("decode_frame: checksum mismatch");
  return out;
}

// ---------------------------------------------------------------------------
// Container I/O.

inline void EvolvingStream::write(const std::filesystem::path& path) const {
  ByteWriter w;
  w.raw(reinterpret_cast<const uint8_t*>("EGS1"), 4);
  w.u8(header.version);
  w.u8(header.sh_degree);
  w.u16(0);  // reserved
  w.u32(header.frame_count);
  w.u32(header.intra_interval);
  for (const QuantParams* q : {&header.spec.mean, &header.spec.rotation, &header.spec.log_scale,
                               &header.spec.opacity, &header.spec.sh0}) {
    w.u8(static_cast<uint8_t>(q->bits));
    w.f64(q->step);
    w.f64(q->zero_point);
  }
  w.u8(static_cast<uint8_t>(header.spec.sh_rest_bits));
  w.u32(static_cast<uint32_t>(chunks.size()));
  for (const auto& c : chunks) {
    w.u8(static_cast<uint8_t>(c.type));
    w.u32(c.frame_index);
    w.u32(static_cast<uint32_t>(c.payload.size()));
    w.raw(c.payload.data(), c.payload.size());
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("EvolvingStream: cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw InvalidInput("EvolvingStream: write failed: " + path.string());
}

inline EvolvingStream EvolvingStream::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("EvolvingStream: cannot open: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  ByteReader r(bytes);
  char magic[4];
  for (auto& m : magic) m = static_cast<char>(r.u8());
  if (std::string_view(magic, 4) != "EGS1") throw FormatError("EvolvingStream: bad magic");
  EvolvingStream s;
  s.header.version = r.u8();
  if (s.header.version != 1) throw FormatError("EvolvingStream: unsupported version");
  s.header.sh_degree = r.u8();
  r.u16();
  s.header.frame_count = r.u32();
  s.header.intra_interval = r.u32();
  for (QuantParams* q : {&s.header.spec.mean, &s.header.spec.rotation, &s.header.spec.log_scale,
                         &s.header.spec.opacity, &s.header.spec.sh0}) {
    q->bits = r.u8();
    q->step = r.f64();
    q->zero_point = r.f64();
  }
  s.header.spec.sh_rest_bits = r.u8();
  s.header.spec.validate();
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    FrameChunk c;
    c.type = static_cast<ChunkType>(r.u8());
    c.frame_index = r.u32();
    const uint32_t len = r.u32();
    if (len > r.remaining()) throw CorruptChunk("EvolvingStream: truncated chunk");
    c.payload.resize(len);
    for (uint32_t b = 0; b < len; ++b) c.payload[b] = r.u8();
    s.chunks.push_back(std::move(c));
  }
  return s;
}

// Raw float32 serialization size of a frame (the compression-ratio baseline).
inline size_t raw_frame_bytes(const GaussianFrame& frame) {
  size_t floats = 0;
  for (const auto& p : frame.points) floats += 3 + 4 + 3 + 1 + p.appearance.sh.coeffs.size();
  return floats * 4;
}

}  // namespace egs
