#include "gfe/wire.hpp"

#include "gfe/bytes.hpp"

namespace gfe {

bool known_tag(std::uint8_t tag) { return tag >= 1 && tag <= 12; }

std::string_view tag_name(Tag tag) {
  switch (tag) {
    case Tag::acquire: return "ACQUIRE";
    case Tag::grant: return "GRANT";
    case Tag::none_available: return "NONE_AVAILABLE";
    case Tag::release: return "RELEASE";
    case Tag::part_get: return "PART_GET";
    case Tag::part_put: return "PART_PUT";
    case Tag::part_data: return "PART_DATA";
    case Tag::param_fetch: return "PARAM_FETCH";
    case Tag::param_values: return "PARAM_VALUES";
    case Tag::param_push_acc: return "PARAM_PUSH_ACC";
    case Tag::ack: return "ACK";
    case Tag::epoch_barrier: return "EPOCH_BARRIER";
  }
  return "UNKNOWN";
}

std::string encode_frame(const Frame& frame) {
  if (frame.payload.size() > kMaxPayloadBytes) throw ProtocolError("payload too large");
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(frame.tag));
  w.u32(static_cast<std::uint32_t>(frame.payload.size()));
  w.bytes(frame.payload);
  return w.take();
}

void FrameDecoder::feed(std::string_view bytes) {
  if (offset_ > 0 && offset_ == buffer_.size()) {
    buffer_.clear();
    offset_ = 0;
  }
  buffer_.append(bytes);
  while (true) {
    const std::size_t avail = buffer_.size() - offset_;
    if (avail == 0) break;
    const auto tag = static_cast<std::uint8_t>(buffer_[offset_]);
    if (!known_tag(tag)) throw ProtocolError("unknown message tag " + std::to_string(tag));
    if (avail < kFrameHeaderBytes) break;
    ByteReader header(std::string_view(buffer_).substr(offset_ + 1, 4));
    const std::uint32_t length = header.u32();
    if (length > max_payload_) throw ProtocolError("payload length " + std::to_string(length) + " exceeds limit");
    if (avail < kFrameHeaderBytes + length) break;
    ready_.push_back({static_cast<Tag>(tag), buffer_.substr(offset_ + kFrameHeaderBytes, length)});
    offset_ += kFrameHeaderBytes + length;
  }
  // Drop consumed bytes once they dominate the buffer.
  if (offset_ > (1u << 20) && offset_ * 2 > buffer_.size()) {
    buffer_.erase(0, offset_);
    offset_ = 0;
  }
}

std::optional<Frame> FrameDecoder::next() {
  if (ready_.empty()) return std::nullopt;
  Frame f = std::move(ready_.front());
  ready_.pop_front();
  return f;
}

namespace {

class PayloadReader {
 public:
  PayloadReader(const Frame& f, Tag expected) : reader_(f.payload) {
    if (f.tag != expected) {
      throw ProtocolError("expected " + std::string(tag_name(expected)) + ", got " + std::string(tag_name(f.tag)));
    }
  }
  ByteReader* operator->() { return &reader_; }
  std::int32_t i32() { return static_cast<std::int32_t>(reader_.u32()); }
  std::string rest() { return std::string(reader_.take(reader_.remaining())); }
  void finish() {
    if (reader_.remaining() != 0) throw ProtocolError("trailing bytes in payload");
  }
  std::uint32_t count(std::size_t min_bytes_each) {
    const auto n = reader_.u32();
    if (min_bytes_each > 0 && n > reader_.remaining() / min_bytes_each) throw ProtocolError("count exceeds payload");
    return n;
  }

 private:
  ByteReader reader_;
};

template <typename F>
auto guarded(F&& f) {
  try {
    return f();
  } catch (const ProtocolError&) {
    throw;
  } catch (const std::exception& e) {
    throw ProtocolError(std::string("malformed payload: ") + e.what());
  }
}

void put_i32(ByteWriter& w, int v) { w.u32(static_cast<std::uint32_t>(v)); }

void put_key(ByteWriter& w, const ParamKey& k) {
  w.u8(static_cast<std::uint8_t>(k.kind));
  put_i32(w, k.a);
  put_i32(w, k.b);
}

ParamKey get_key(PayloadReader& r) {
  const auto kind = r->u8();
  if (kind > 1) throw ProtocolError("unknown parameter kind");
  ParamKey k;
  k.kind = static_cast<ParamKind>(kind);
  k.a = r.i32();
  k.b = r.i32();
  return k;
}

void put_floats(ByteWriter& w, const std::vector<float>& v) {
  w.u32(static_cast<std::uint32_t>(v.size()));
  w.f32s(v.data(), v.size());
}

std::vector<float> get_floats(PayloadReader& r) {
  std::vector<float> v(r.count(4));
  r->f32s(v.data(), v.size());
  return v;
}

Frame make(Tag tag, ByteWriter& w) { return {tag, w.take()}; }

}  // namespace

Frame encode(const AcquireMsg& m) {
  ByteWriter w;
  put_i32(w, m.round);
  return make(Tag::acquire, w);
}

Frame encode(const GrantMsg& m) {
  ByteWriter w;
  put_i32(w, m.bucket.src);
  put_i32(w, m.bucket.dst);
  put_i32(w, m.round);
  return make(Tag::grant, w);
}

Frame encode(const NoneAvailableMsg& m) {
  ByteWriter w;
  w.u8(m.round_complete ? 1 : 0);
  w.u32(m.retry_after_ms);
  return make(Tag::none_available, w);
}

Frame encode(const ReleaseMsg& m) {
  ByteWriter w;
  w.u8(m.completed ? 1 : 0);
  if (m.completed) {
    put_i32(w, m.completed->src);
    put_i32(w, m.completed->dst);
  }
  w.u32(static_cast<std::uint32_t>(m.unlock.size()));
  for (int p : m.unlock) put_i32(w, p);
  return make(Tag::release, w);
}

Frame encode(const AckMsg& m) {
  ByteWriter w;
  w.u64(m.value);
  return make(Tag::ack, w);
}

Frame encode(const BarrierMsg& m) {
  ByteWriter w;
  put_i32(w, m.id);
  w.u32(m.participants);
  return make(Tag::epoch_barrier, w);
}

Frame encode(const PartGetMsg& m) {
  ByteWriter w;
  put_i32(w, m.key.entity_type);
  put_i32(w, m.key.partition);
  w.u8(m.snapshot ? 1 : 0);
  return make(Tag::part_get, w);
}

Frame encode(const PartPutMsg& m) {
  ByteWriter w;
  put_i32(w, m.key.entity_type);
  put_i32(w, m.key.partition);
  w.bytes(m.blob);
  return make(Tag::part_put, w);
}

Frame encode(const PartDataMsg& m) {
  ByteWriter w;
  w.u8(m.found ? 1 : 0);
  w.bytes(m.blob);
  return make(Tag::part_data, w);
}

Frame encode(const ParamFetchMsg& m) {
  ByteWriter w;
  w.u8(m.with_accumulators ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(m.keys.size()));
  for (const auto& k : m.keys) put_key(w, k);
  return make(Tag::param_fetch, w);
}

Frame encode(const ParamValuesMsg& m) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(m.blocks.size()));
  for (const auto& b : m.blocks) {
    put_key(w, b.key);
    w.u64(b.version);
    put_floats(w, b.values);
    put_floats(w, b.accumulators);
  }
  return make(Tag::param_values, w);
}

Frame encode(const ParamPushMsg& m) {
  ByteWriter w;
  w.u32(static_cast<std::uint32_t>(m.entries.size()));
  for (const auto& e : m.entries) {
    if (e.grads.size() != e.rows.size() * e.width) throw ProtocolError("push entry size mismatch");
    put_key(w, e.key);
    w.u32(static_cast<std::uint32_t>(e.rows.size()));
    w.u32(e.width);
    for (std::size_t i = 0; i < e.rows.size(); ++i) {
      w.u32(e.rows[i]);
      w.f32s(e.grads.data() + i * e.width, e.width);
    }
  }
  return make(Tag::param_push_acc, w);
}

AcquireMsg decode_acquire(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::acquire);
    AcquireMsg m{r.i32()};
    r.finish();
    return m;
  });
}

GrantMsg decode_grant(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::grant);
    GrantMsg m;
    m.bucket.src = r.i32();
    m.bucket.dst = r.i32();
    m.round = r.i32();
    r.finish();
    return m;
  });
}

NoneAvailableMsg decode_none_available(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::none_available);
    NoneAvailableMsg m;
    m.round_complete = r->u8() != 0;
    m.retry_after_ms = r->u32();
    r.finish();
    return m;
  });
}

ReleaseMsg decode_release(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::release);
    ReleaseMsg m;
    if (r->u8() != 0) {
      BucketId b;
      b.src = r.i32();
      b.dst = r.i32();
      m.completed = b;
    }
    const auto n = r.count(4);
    for (std::uint32_t i = 0; i < n; ++i) m.unlock.push_back(r.i32());
    r.finish();
    return m;
  });
}

AckMsg decode_ack(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::ack);
    AckMsg m{r->u64()};
    r.finish();
    return m;
  });
}

BarrierMsg decode_barrier(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::epoch_barrier);
    BarrierMsg m;
    m.id = r.i32();
    m.participants = r->u32();
    r.finish();
    return m;
  });
}

PartGetMsg decode_part_get(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::part_get);
    PartGetMsg m;
    m.key.entity_type = r.i32();
    m.key.partition = r.i32();
    m.snapshot = r->u8() != 0;
    r.finish();
    return m;
  });
}

PartPutMsg decode_part_put(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::part_put);
    PartPutMsg m;
    m.key.entity_type = r.i32();
    m.key.partition = r.i32();
    m.blob = r.rest();
    return m;
  });
}

PartDataMsg decode_part_data(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::part_data);
    PartDataMsg m;
    m.found = r->u8() != 0;
    m.blob = r.rest();
    if (!m.found && !m.blob.empty()) throw ProtocolError("not-found reply carries data");
    return m;
  });
}

ParamFetchMsg decode_param_fetch(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::param_fetch);
    ParamFetchMsg m;
    m.with_accumulators = r->u8() != 0;
    const auto n = r.count(9);
    for (std::uint32_t i = 0; i < n; ++i) m.keys.push_back(get_key(r));
    r.finish();
    return m;
  });
}

ParamValuesMsg decode_param_values(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::param_values);
    ParamValuesMsg m;
    const auto n = r.count(25);
    for (std::uint32_t i = 0; i < n; ++i) {
      ParamBlock b;
      b.key = get_key(r);
      b.version = r->u64();
      b.values = get_floats(r);
      b.accumulators = get_floats(r);
      m.blocks.push_back(std::move(b));
    }
    r.finish();
    return m;
  });
}

ParamPushMsg decode_param_push(const Frame& f) {
  return guarded([&] {
    PayloadReader r(f, Tag::param_push_acc);
    ParamPushMsg m;
    const auto n = r.count(17);
    for (std::uint32_t i = 0; i < n; ++i) {
      ParamPushEntry e;
      e.key = get_key(r);
      const auto rows = r->u32();
      e.width = r->u32();
      const std::uint64_t row_bytes = 4 + 4ull * e.width;
      if (rows > r->remaining() / row_bytes) throw ProtocolError("push rows exceed payload");
      e.rows.resize(rows);
      e.grads.resize(static_cast<std::size_t>(rows) * e.width);
      for (std::uint32_t k = 0; k < rows; ++k) {
        e.rows[k] = r->u32();
        r->f32s(e.grads.data() + static_cast<std::size_t>(k) * e.width, e.width);
      }
      m.entries.push_back(std::move(e));
    }
    r.finish();
    return m;
  });
}

}  // namespace gfe
