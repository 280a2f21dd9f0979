#pragma once

// Carryless 32-bit range coder with static per-stream frequency tables.
// Integer arithmetic only, so encoded bytes are identical across platforms.
// Residual values are coded as sign/magnitude-bucket symbols plus raw
// refinement bits, keeping the alphabet small for any quantizer width.

#include <bit>
#include <cstdint>
#include <vector>

#include "egs/bytes.hpp"

namespace egs {

namespace rc_detail {
constexpr uint32_t kTop = 1u << 24;
constexpr uint32_t kBot = 1u << 16;
}  // namespace rc_detail

class RangeEncoder {
 public:
  void encode(uint32_t cum, uint32_t freq, uint32_t total) {
    using namespace rc_detail;
    low_ += cum * (range_ /= total);
    range_ *= freq;
    while ((low_ ^ (low_ + range_)) < kTop || (range_ < kBot && ((range_ = -low_ & (kBot - 1)), true))) {
      out_.push_back(static_cast<uint8_t>(low_ >> 24));
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  // Uniform raw bits (chunked so totals stay below the coder limit).
  void encode_bits(uint32_t value, int bits) {
    while (bits > 0) {
      const int chunk = bits > 12 ? 12 : bits;
      const uint32_t piece = (value >> (bits - chunk)) & ((1u << chunk) - 1);
      encode(piece, 1, 1u << chunk);
      bits -= chunk;
    }
  }

  std::vector<uint8_t> finish() {
    for (int i = 0; i < 4; ++i) {
      out_.push_back(static_cast<uint8_t>(low_ >> 24));
      low_ <<= 8;
    }
    return std::move(out_);
  }

 private:
  uint32_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  std::vector<uint8_t> out_;
};

class RangeDecoder {
 public:
  RangeDecoder(const uint8_t* data, size_t size) : data_(data), size_(size) {
    for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
  }

  uint32_t decode_freq(uint32_t total) {
    const uint32_t f = (code_ - low_) / (range_ /= total);
    if (f >= total) throw CorruptChunk("range decoder: frequency out of range");
    return f;
  }

  void decode_update(uint32_t cum, uint32_t freq) {
    using namespace rc_detail;
    low_ += cum * range_;
    range_ *= freq;
    while ((low_ ^ (low_ + range_)) < kTop || (range_ < kBot && ((range_ = -low_ & (kBot - 1)), true))) {
      code_ = (code_ << 8) | next_byte();
      low_ <<= 8;
      range_ <<= 8;
    }
  }

  uint32_t decode_bits(int bits) {
    uint32_t v = 0;
    while (bits > 0) {
      const int chunk = bits > 12 ? 12 : bits;
      const uint32_t piece = decode_freq(1u << chunk);
      decode_update(piece, 1);
      v = (v << chunk) | piece;
      bits -= chunk;
    }
    return v;
  }

 private:
  uint8_t next_byte() {
    // Reading past the payload is legal for the final flush window.
    return pos_ < size_ ? data_[pos_++] : 0;
  }
  const uint8_t* data_;
  size_t size_;
  size_t pos_ = 0;
  uint32_t low_ = 0;
  uint32_t range_ = 0xFFFFFFFFu;
  uint32_t code_ = 0;
};

// ---------------------------------------------------------------------------
// Static frequency table over a small alphabet.

class FrequencyTable {
 public:
  explicit FrequencyTable(std::vector<uint32_t> counts) : freq_(std::move(counts)) { normalize(); }

  static FrequencyTable from_histogram(const std::vector<uint32_t>& hist) { return FrequencyTable(hist); }

  uint32_t total() const { return total_; }
  size_t alphabet() const { return freq_.size(); }
  uint32_t freq(size_t s) const { return freq_[s]; }
  uint32_t cum(size_t s) const { return cum_[s]; }

  size_t find(uint32_t f) const {
    size_t lo = 0, hi = freq_.size();
    while (lo + 1 < hi) {
      const size_t mid = (lo + hi) / 2;
      if (cum_[mid] <= f)
        lo = mid;
      else
        hi = mid;
    }
    return lo;
  }

  void serialize(ByteWriter& w) const {
    w.varint(freq_.size());
    for (uint32_t f : freq_) w.varint(f);
  }

  static FrequencyTable deserialize(ByteReader& r) {
    const uint64_t n = r.varint();
    if (n == 0 || n > 4096) throw CorruptChunk("frequency table: bad alphabet size");
    std::vector<uint32_t> counts(n);
    for (auto& c : counts) c = static_cast<uint32_t>(r.varint());
    return FrequencyTable(std::move(counts));
  }

 private:
  void normalize() {
    uint64_t sum = 0;
    for (uint32_t f : freq_) sum += f;
    if (sum == 0) {
      freq_.assign(freq_.empty() ? 1 : freq_.size(), 0);
      freq_[0] = 1;
      sum = 1;
    }
    // Scale into [1, 2^15] while keeping every present symbol representable.
    constexpr uint64_t kTarget = 1u << 15;
    if (sum > kTarget) {
      for (auto& f : freq_) {
        if (f == 0) continue;
        const uint64_t scaled = (static_cast<uint64_t>(f) * kTarget) / sum;
        f = static_cast<uint32_t>(scaled == 0 ? 1 : scaled);
      }
    }
    cum_.assign(freq_.size(), 0);
    uint32_t acc = 0;
    for (size_t i = 0; i < freq_.size(); ++i) {
      cum_[i] = acc;
      acc += freq_[i];
    }
    total_ = acc;
    if (total_ >= rc_detail::kBot) throw InvalidParameter("frequency table total too large");
  }

  std::vector<uint32_t> freq_;
  std::vector<uint32_t> cum_;
  uint32_t total_ = 0;
};

// ---------------------------------------------------------------------------
// Value stream: sign + magnitude-bucket symbols entropy-coded with a static
// table, refinement bits raw. Bucket b holds magnitudes [2^(b-1), 2^b).

namespace rc_detail {

inline uint32_t bucket_of(int32_t v) {
  if (v == 0) return 0;
  const uint32_t m = static_cast<uint32_t>(v < 0 ? -static_cast<int64_t>(v) : v);
  const int b = std::bit_width(m);
  return 1 + 2 * static_cast<uint32_t>(b - 1) + (v < 0 ? 1u : 0u);
}

}  // namespace rc_detail

// Encodes the values as [count][table][payload blob] into the writer.
inline void entropy_encode(const std::vector<int32_t>& values, ByteWriter& w) {
  w.varint(values.size());
  if (values.empty()) return;
  std::vector<uint32_t> hist;
  for (int32_t v : values) {
    const uint32_t s = rc_detail::bucket_of(v);
    if (s >= hist.size()) hist.resize(s + 1, 0);
    ++hist[s];
  }
  FrequencyTable table(hist);
  table.serialize(w);
  RangeEncoder enc;
  for (int32_t v : values) {
    const uint32_t s = rc_detail::bucket_of(v);
    enc.encode(table.cum(s), table.freq(s), table.total());
    if (s != 0) {
      const int b = static_cast<int>((s - 1) / 2) + 1;
      const uint32_t m = static_cast<uint32_t>(v < 0 ? -static_cast<int64_t>(v) : v);
      if (b > 1) enc.encode_bits(m - (1u << (b - 1)), b - 1);
    }
  }
  w.blob(enc.finish());
}

inline std::vector<int32_t> entropy_decode(ByteReader& r) {
  const uint64_t count = r.varint();
  std::vector<int32_t> values;
  if (count == 0) return values;
  if (count > (1ull << 32)) throw CorruptChunk("entropy stream: absurd count");
  values.reserve(count);
  FrequencyTable table = FrequencyTable::deserialize(r);
  const auto payload = r.blob();
  RangeDecoder dec(payload.data(), payload.size());
  for (uint64_t i = 0; i < count; ++i) {
    const uint32_t f = dec.decode_freq(table.total());
    const size_t s = table.find(f);
    if (table.freq(s) == 0) throw CorruptChunk("entropy stream: invalid symbol");
    dec.decode_update(table.cum(s), table.freq(s));
    if (s == 0) {
      values.push_back(0);
      continue;
    }
    const int b = static_cast<int>((s - 1) / 2) + 1;
    const bool negative = ((s - 1) % 2) != 0;
    uint32_t m = 1u << (b - 1);
    if (b > 1) m += dec.decode_bits(b - 1);
    values.push_back(negative ? -static_cast<int32_t>(m) : static_cast<int32_t>(m));
  }
  return values;
}

}  // namespace egs
