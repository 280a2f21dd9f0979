#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "egs/codec.hpp"
#include "egs/testkit.hpp"

using namespace egs;

namespace {

// A tracked-like synthetic evolution independent of the real tracker: rigid
// warp parameters per frame, small per-point pose residuals, occasional
// spawns (clones of a live point) and removals.
struct CodecSequence {
  std::vector<GaussianFrame> frames;             // full-precision "refined" states
  std::vector<std::vector<uint64_t>> removals;   // per transition
  std::vector<WarpParams> warps;                 // per transition (may be empty)
};

CodecSequence make_sequence(int num_frames, int points, int sh_degree, uint64_t seed,
                            double motion_scale = 1.0, int spawn_per_frame = 2,
                            int remove_per_frame = 1, int warp_nodes = 12) {
  Rng rng(seed);
  CodecSequence seq;
  GaussianFrame frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.35, points}}, sh_degree);
  frame.frame_index = 0;
  seq.frames.push_back(frame);
  IdAllocator ids = IdAllocator::after(frame);

  for (int t = 1; t < num_frames; ++t) {
    GaussianFrame prev = seq.frames.back();
    // Global rigid motion for this transition.
    WarpParams warp;
    if (warp_nodes > 0) {
      const double angle = 0.02 * motion_scale;
      const Quat q{std::cos(angle / 2), 0.0, std::sin(angle / 2), 0.0};
      const Vec3 b = motion_scale * Vec3(0.004, -0.002, 0.003);
      warp.seed = seed * 1000 + t;
      warp.node_count = warp_nodes;
      warp.k_point = 4;
      DeformationGraph g = sample_control_nodes(prev, warp_nodes, warp.seed);
      const Mat3 rot = q.to_matrix_normalized();
      for (const auto& node : g.nodes) {
        warp.rotations.push_back(q);
        warp.translations.push_back(rot * node.center + b - node.center);
      }
      bind_weights(g, prev, warp.k_point, 6);
      for (size_t j = 0; j < g.nodes.size(); ++j) {
        g.nodes[j].rotation = warp.rotations[j];
        g.nodes[j].translation = warp.translations[j];
      }
      prev = warp_frame(g, prev);
    }
    GaussianFrame cur = prev;
    cur.frame_index = t;
    for (auto& p : cur.points) {
      p.cls = PointClass::Reference;
      // Small refinement-like pose residuals.
      p.pose.mean += 1e-3 * motion_scale * rng.normal3();
      Quat jitter{1.0, 1e-3 * rng.normal(), 1e-3 * rng.normal(), 1e-3 * rng.normal()};
      p.pose.rotation = normalize_rotation(jitter * p.pose.rotation);
    }
    // Removals.
    std::vector<uint64_t> removed;
    for (int k = 0; k < remove_per_frame && cur.points.size() > 10; ++k) {
      const size_t victim = rng.below(cur.points.size());
      removed.push_back(cur.points[victim].id);
      cur.points.erase(cur.points.begin() + static_cast<ptrdiff_t>(victim));
    }
    // Spawns: clones of live points with small deltas.
    for (int k = 0; k < spawn_per_frame; ++k) {
      const size_t src = rng.below(cur.points.size());
      GaussianPoint child = cur.points[src];
      child.ancestor_id = child.id;
      child.id = ids.alloc();
      child.cls = PointClass::Extension;
      child.birth_frame = t;
      child.pose.mean += 5e-3 * rng.normal3();
      child.appearance.opacity_logit += 0.05 * rng.normal();
      cur.points.push_back(child);
    }
    cur.sort_by_id();
    cur.recompute_bbox();
    seq.frames.push_back(cur);
    seq.removals.push_back(removed);
    seq.warps.push_back(warp);
  }
  return seq;
}

}  // namespace

TEST_CASE("quantize/dequantize basic arithmetic") {
  QuantParams q{16, 2e-4, 0.0};
  CHECK(quantize(0.00037, q) == 2);
  CHECK(dequantize(2, q) == doctest::Approx(0.0004));
  CHECK(quantize(0.0, q) == 0);
  CHECK(dequantize(0, q) == 0.0);
  CHECK(quantize(10.0, q) == 32767);
  CHECK(dequantize(32767, q) == doctest::Approx(6.5534));
  CHECK(quantize(-10.0, q) == -32767);

  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(-6.0, 6.0);
    CHECK(std::abs(dequantize(quantize(x, q), q) - x) <= q.step / 2 + 1e-15);
  }
}

TEST_CASE("axis-angle conversion round trips") {
  CHECK(quat_to_axis_angle(Quat::identity()) == Vec3::Zero());
  const Quat qx{std::cos(M_PI / 4), std::sin(M_PI / 4), 0, 0};
  const Vec3 aa = quat_to_axis_angle(qx);
  CHECK(aa.x() == doctest::Approx(M_PI / 2).epsilon(1e-12));
  CHECK(aa.y() == doctest::Approx(0.0));

  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const Quat q = rng.unit_quat();
    const Quat back = axis_angle_to_quat(quat_to_axis_angle(q));
    CHECK(std::abs(back.w - q.w) < 1e-9);
    CHECK(std::abs(back.x - q.x) < 1e-9);
    CHECK(std::abs(back.y - q.y) < 1e-9);
    CHECK(std::abs(back.z - q.z) < 1e-9);
  }
  // Near-identity stability.
  const Quat tiny = normalize_rotation(Quat{1.0, 1e-13, -2e-13, 5e-14});
  const Quat back = axis_angle_to_quat(quat_to_axis_angle(tiny));
  CHECK(std::abs(back.w - 1.0) < 1e-12);
}

TEST_CASE("entropy coder: empty, constant and bound checks") {
  ByteWriter w;
  entropy_encode({}, w);
  ByteReader r(w.bytes);
  CHECK(entropy_decode(r).empty());

  std::vector<int32_t> zeros(10000, 0);
  ByteWriter w2;
  entropy_encode(zeros, w2);
  // Count varint + tiny table + near-empty payload.
  CHECK(w2.size() <= 64);
  ByteReader r2(w2.bytes);
  CHECK(entropy_decode(r2) == zeros);
}

TEST_CASE("entropy coder: fuzz round trip") {
  Rng rng(3);
  for (int round = 0; round < 1000; ++round) {
    const size_t n = rng.below(200);
    std::vector<int32_t> values(n);
    const int span = 1 + static_cast<int>(rng.below(15));
    for (auto& v : values) {
      const int32_t m = static_cast<int32_t>(rng.below(1u << span));
      v = rng.below(2) ? m : -m;
    }
    ByteWriter w;
    entropy_encode(values, w);
    ByteReader r(w.bytes);
    const auto back = entropy_decode(r);
    REQUIRE(back == values);
  }
}

TEST_CASE("entropy coder: truncated stream raises") {
  std::vector<int32_t> values(100, 7);
  ByteWriter w;
  entropy_encode(values, w);
  ByteWriter cut;
  cut.bytes.assign(w.bytes.begin(), w.bytes.begin() + static_cast<ptrdiff_t>(w.bytes.size() / 4));
  ByteReader r(cut.bytes);
  CHECK_THROWS_AS(entropy_decode(r), CorruptChunk);
}

TEST_CASE("intra chunk: empty, single point, and size gain") {
  QuantSpec spec;
  GaussianFrame empty;
  const auto e = encode_intra(empty, spec);
  CHECK(decode_intra(e.chunk).points.empty());

  Rng rng(4);
  GaussianFrame one;
  one.points.push_back(testkit::random_point(rng, 3, Vec3::Zero(), 0.1, 2));
  one.recompute_bbox();
  const auto r1 = encode_intra(one, spec);
  const auto d1 = decode_intra(r1.chunk);
  REQUIRE(d1.points.size() == 1);
  CHECK(d1.points[0].id == 3);
  // Decode equals the encoder's closed-loop reconstruction bit-exactly.
  CHECK(codec_detail::serialize_features(d1) == codec_detail::serialize_features(r1.decoded));
  // And the quantized point is close to the source.
  CHECK((d1.points[0].pose.mean - one.points[0].pose.mean).lpNorm<Eigen::Infinity>() < 1e-3);

  const auto big = testkit::random_frame(rng, {{{0, 0, 0}, 0.4, 10000}}, 3);
  const auto rb = encode_intra(big, spec);
  CHECK(rb.chunk.payload.size() < raw_frame_bytes(big));
  const auto db = decode_intra(rb.chunk);
  CHECK(codec_detail::serialize_features(db) == codec_detail::serialize_features(rb.decoded));
}

TEST_CASE("predicted chunk: zero-residual frame compresses to well under 1%") {
  QuantSpec spec;
  Rng rng(5);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.4, 5000}}, 3);
  const auto intra = encode_intra(frame, spec);

  GaussianFrame cur = intra.decoded;  // identical to the decoded state
  cur.frame_index = 1;
  for (auto& p : cur.points) p.cls = PointClass::Reference;
  const auto pred = encode_frame(intra.decoded, cur, {}, spec, nullptr);
  CHECK(pred.chunk.payload.size() < raw_frame_bytes(frame) / 100);

  const auto decoded = decode_frame(intra.decoded, pred.chunk, spec);
  CHECK(codec_detail::serialize_features(decoded) == codec_detail::serialize_features(pred.decoded));
  // Identity warp + zero residuals: the frame passes through exactly.
  GaussianFrame expect = intra.decoded;
  expect.frame_index = 1;
  CHECK(codec_detail::serialize_features(decoded) == codec_detail::serialize_features(expect));
}

TEST_CASE("predicted chunk: removal-only and clone cases") {
  QuantSpec spec;
  Rng rng(6);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.3, 50}}, 1);
  const auto intra = encode_intra(frame, spec);

  // Removal only.
  GaussianFrame cur = intra.decoded;
  cur.frame_index = 1;
  const uint64_t victim = cur.points[7].id;
  cur.points.erase(cur.points.begin() + 7);
  for (auto& p : cur.points) p.cls = PointClass::Reference;
  const auto pred = encode_frame(intra.decoded, cur, {victim}, spec, nullptr);
  const auto decoded = decode_frame(intra.decoded, pred.chunk, spec);
  REQUIRE(decoded.points.size() == intra.decoded.points.size() - 1);
  CHECK(decoded.find(victim) == nullptr);

  // A spawned clone identical to its ancestor decodes identical to it.
  GaussianFrame cur2 = decoded;
  cur2.frame_index = 2;
  for (auto& p : cur2.points) p.cls = PointClass::Reference;
  GaussianPoint clone = cur2.points[3];
  clone.ancestor_id = clone.id;
  clone.id = cur2.max_id() + 1;
  clone.cls = PointClass::Extension;
  clone.birth_frame = 2;
  cur2.points.push_back(clone);
  const auto pred2 = encode_frame(decoded, cur2, {}, spec, nullptr);
  const auto decoded2 = decode_frame(decoded, pred2.chunk, spec);
  const GaussianPoint* child = decoded2.find(clone.id);
  const GaussianPoint* anc = decoded2.find(clone.ancestor_id);
  REQUIRE(child != nullptr);
  REQUIRE(anc != nullptr);
  CHECK(child->pose.mean == anc->pose.mean);
  CHECK(child->appearance.opacity_logit == anc->appearance.opacity_logit);
  CHECK(child->appearance.sh.coeffs == anc->appearance.sh.coeffs);
}

TEST_CASE("30-frame sequence: closed-loop CRC and per-feature quantization error") {
  QuantSpec spec;
  const auto seq = make_sequence(30, 300, 2, 7);
  auto res = encode_intra(seq.frames[0], spec);
  GaussianFrame decoded = std::move(res.decoded);

  for (size_t t = 1; t < seq.frames.size(); ++t) {
    const auto& cur = seq.frames[t];
    auto enc = encode_frame(decoded, cur, seq.removals[t - 1], spec,
                            seq.warps[t - 1].node_count ? &seq.warps[t - 1] : nullptr);
    const auto dec = decode_frame(decoded, enc.chunk, spec);  // CRC-verified inside
    CHECK(codec_detail::serialize_features(dec) == codec_detail::serialize_features(enc.decoded));

    // Quantized groups: decoded values within step/2 of the encoder-side
    // pre-quantization values.
    for (const auto& p : dec.points) {
      const GaussianPoint* src = cur.find(p.id);
      REQUIRE(src != nullptr);
      CHECK((p.pose.mean - src->pose.mean).lpNorm<Eigen::Infinity>() <= spec.mean.step / 2 + 1e-12);
      const Vec3 aa_dec = quat_to_axis_angle(normalize_rotation(p.pose.rotation));
      const Vec3 aa_src = quat_to_axis_angle(normalize_rotation(src->pose.rotation));
      CHECK((aa_dec - aa_src).lpNorm<Eigen::Infinity>() <= spec.rotation.step / 2 + 1e-9);
      if (p.birth_frame == static_cast<int32_t>(t)) {
        CHECK(std::abs(p.appearance.opacity_logit - src->appearance.opacity_logit) <=
              spec.opacity.step / 2 + 1e-12);
        for (int ch = 0; ch < 3; ++ch)
          CHECK(std::abs(p.appearance.sh.at(ch, 0) - src->appearance.sh.at(ch, 0)) <=
                spec.sh0.step / 2 + 1e-12);
      }
    }
    decoded = dec;
  }
}

TEST_CASE("sequence with re-warp carries node parameters") {
  QuantSpec spec;
  const auto seq = make_sequence(5, 200, 0, 11, 2.0, 3, 2, 16);
  auto res = encode_intra(seq.frames[0], spec);
  GaussianFrame decoded = std::move(res.decoded);
  size_t total = 0;
  for (size_t t = 1; t < seq.frames.size(); ++t) {
    auto enc = encode_frame(decoded, seq.frames[t], seq.removals[t - 1], spec, &seq.warps[t - 1]);
    total += enc.chunk.payload.size();
    decoded = decode_frame(decoded, enc.chunk, spec);
    CHECK(codec_detail::serialize_features(decoded) == codec_detail::serialize_features(enc.decoded));
  }
  CHECK(total > 0);
}

TEST_CASE("re-encoding decoded frames is byte-identical (lattice idempotence)") {
  QuantSpec spec;
  const auto seq = make_sequence(6, 150, 2, 13, 1.0, 2, 1, 8);

  // First pass.
  auto intra1 = encode_intra(seq.frames[0], spec);
  std::vector<FrameChunk> chunks1{intra1.chunk};
  std::vector<GaussianFrame> decoded_frames{intra1.decoded};
  GaussianFrame decoded = intra1.decoded;
  for (size_t t = 1; t < seq.frames.size(); ++t) {
    auto enc = encode_frame(decoded, seq.frames[t], seq.removals[t - 1], spec, &seq.warps[t - 1]);
    chunks1.push_back(enc.chunk);
    decoded = enc.decoded;
    decoded_frames.push_back(decoded);
  }

  // Second pass: encode the decoded frames themselves (same warp sidecars,
  // removals derived the same way).
  auto intra2 = encode_intra(decoded_frames[0], spec);
  CHECK(intra2.chunk.payload == chunks1[0].payload);
  GaussianFrame decoded2 = intra2.decoded;
  for (size_t t = 1; t < decoded_frames.size(); ++t) {
    auto enc = encode_frame(decoded2, decoded_frames[t], seq.removals[t - 1], spec, &seq.warps[t - 1]);
    CHECK(enc.chunk.payload == chunks1[t].payload);
    decoded2 = enc.decoded;
  }
}

TEST_CASE("size monotonicity: smaller residuals never enlarge the chunk") {
  QuantSpec spec;
  Rng rng(17);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.35, 400}}, 0);
  const auto intra = encode_intra(frame, spec);

  auto residual_chunk = [&](double scale) {
    GaussianFrame cur = intra.decoded;
    cur.frame_index = 1;
    Rng noise(23);  // same noise stream for every scale
    for (auto& p : cur.points) {
      p.cls = PointClass::Reference;
      p.pose.mean += scale * 1e-3 * noise.normal3();
    }
    return encode_frame(intra.decoded, cur, {}, spec, nullptr).chunk.payload.size();
  };
  const size_t s1 = residual_chunk(1.0);
  const size_t s01 = residual_chunk(0.1);
  const size_t s0 = residual_chunk(0.0);
  CHECK(s01 <= s1);
  CHECK(s0 <= s01);
}

TEST_CASE("differential variance is lower than raw feature variance") {
  QuantSpec spec;
  const auto seq = make_sequence(10, 300, 1, 29, 0.5, 2, 0, 8);
  auto intra = encode_intra(seq.frames[0], spec);
  GaussianFrame decoded = intra.decoded;

  auto variance = [](const std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    return var / static_cast<double>(v.size());
  };

  std::vector<double> raw_mean, raw_aa, res_mean, res_aa;
  for (size_t t = 1; t < seq.frames.size(); ++t) {
    auto enc = encode_frame(decoded, seq.frames[t], seq.removals[t - 1], spec, &seq.warps[t - 1]);
    // Reconstruct the warped baseline to measure the residuals the chunk encoded.
    GaussianFrame base = decoded;
    base.points.erase(std::remove_if(base.points.begin(), base.points.end(),
                                     [&](const GaussianPoint& p) {
                                       return std::find(seq.removals[t - 1].begin(), seq.removals[t - 1].end(),
                                                        p.id) != seq.removals[t - 1].end();
                                     }),
                      base.points.end());
    WarpParams warp = seq.warps[t - 1];
    // Quantize node parameters the way the encoder does.
    for (size_t j = 0; j < warp.rotations.size(); ++j) {
      Vec3 aa = quat_to_axis_angle(normalize_rotation(warp.rotations[j]));
      for (int c = 0; c < 3; ++c) aa[c] = dequantize(quantize(aa[c], spec.rotation), spec.rotation);
      warp.rotations[j] = axis_angle_to_quat(aa);
      for (int c = 0; c < 3; ++c)
        warp.translations[j][c] = dequantize(quantize(warp.translations[j][c], spec.mean), spec.mean);
    }
    const GaussianFrame warped = codec_detail::apply_chunk_warp(base, warp);
    for (const auto& wp : warped.points) {
      const GaussianPoint* cp = seq.frames[t].find(wp.id);
      REQUIRE(cp != nullptr);
      for (int c = 0; c < 3; ++c) {
        raw_mean.push_back(cp->pose.mean[c]);
        res_mean.push_back(cp->pose.mean[c] - wp.pose.mean[c]);
      }
      const Vec3 aa_c = quat_to_axis_angle(normalize_rotation(cp->pose.rotation));
      const Vec3 aa_w = quat_to_axis_angle(normalize_rotation(wp.pose.rotation));
      for (int c = 0; c < 3; ++c) {
        raw_aa.push_back(aa_c[c]);
        res_aa.push_back(aa_c[c] - aa_w[c]);
      }
    }
    decoded = enc.decoded;
  }
  CHECK(variance(res_mean) < variance(raw_mean));
  CHECK(variance(res_aa) < variance(raw_aa));
}

TEST_CASE("container round trip and corruption detection") {
  QuantSpec spec;
  const auto seq = make_sequence(4, 100, 1, 31);
  EvolvingStream stream;
  stream.header.sh_degree = 1;
  stream.header.frame_count = 4;
  stream.header.spec = spec;

  auto intra = encode_intra(seq.frames[0], spec);
  stream.chunks.push_back(intra.chunk);
  GaussianFrame decoded = intra.decoded;
  for (size_t t = 1; t < seq.frames.size(); ++t) {
    auto enc = encode_frame(decoded, seq.frames[t], seq.removals[t - 1], spec, &seq.warps[t - 1]);
    stream.chunks.push_back(enc.chunk);
    decoded = enc.decoded;
  }

  const auto path = std::filesystem::temp_directory_path() / "egs_codec_test.egs";
  stream.write(path);
  const auto back = EvolvingStream::read(path);
  REQUIRE(back.chunks.size() == stream.chunks.size());
  for (size_t i = 0; i < stream.chunks.size(); ++i) CHECK(back.chunks[i].payload == stream.chunks[i].payload);

  // Decode the re-read stream end to end.
  GaussianFrame state = decode_intra(back.chunks[0]);
  for (size_t t = 1; t < back.chunks.size(); ++t) state = decode_frame(state, back.chunks[t], back.header.spec);
  CHECK(codec_detail::serialize_features(state) == codec_detail::serialize_features(decoded));

  // Flip one payload byte: the checksum (or stream structure) must object.
  auto corrupted = back;
  corrupted.chunks[2].payload[corrupted.chunks[2].payload.size() / 2] ^= 0x40;
  GaussianFrame s2 = decode_intra(corrupted.chunks[0]);
  s2 = decode_frame(s2, corrupted.chunks[1], spec);
  CHECK_THROWS_AS(decode_frame(s2, corrupted.chunks[2], spec), CorruptChunk);

  // Unknown ancestor id.
  std::filesystem::remove(path);
}

TEST_CASE("decode rejects unknown ancestors") {
  QuantSpec spec;
  Rng rng(37);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.3, 20}}, 0);
  const auto intra = encode_intra(frame, spec);
  GaussianFrame cur = intra.decoded;
  cur.frame_index = 1;
  for (auto& p : cur.points) p.cls = PointClass::Reference;
  GaussianPoint child = cur.points[0];
  child.ancestor_id = 9999999;  // bogus
  child.id = cur.max_id() + 1;
  child.cls = PointClass::Extension;
  child.birth_frame = 1;
  cur.points.push_back(child);
  CHECK_THROWS_AS(encode_frame(intra.decoded, cur, {}, spec, nullptr), CorruptChunk);
}

TEST_CASE("encode_frame rejects id mismatches") {
  QuantSpec spec;
  Rng rng(41);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.3, 20}}, 0);
  const auto intra = encode_intra(frame, spec);
  GaussianFrame cur = intra.decoded;
  cur.frame_index = 1;
  for (auto& p : cur.points) p.cls = PointClass::Reference;
  cur.points.pop_back();  // drop a point without listing the removal
  CHECK_THROWS_AS(encode_frame(intra.decoded, cur, {}, spec, nullptr), CorruptChunk);
}
