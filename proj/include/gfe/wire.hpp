#pragma once

// Wire protocol between trainers and the lock, partition and parameter
// servers. Every message is
//   u8  tag
//   u32 payload length (little-endian)
//   payload
// Payload layouts are documented next to each message struct; integers are
// little-endian, floats IEEE-754 binary32.

#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gfe/scheduler.hpp"

namespace gfe {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Tag : std::uint8_t {
  acquire = 1,
  grant = 2,
  none_available = 3,
  release = 4,
  part_get = 5,
  part_put = 6,
  part_data = 7,
  param_fetch = 8,
  param_values = 9,
  param_push_acc = 10,
  ack = 11,
  epoch_barrier = 12,
};

bool known_tag(std::uint8_t tag);
std::string_view tag_name(Tag tag);

struct Frame {
  Tag tag = Tag::ack;
  std::string payload;
  bool operator==(const Frame&) const = default;
};

inline constexpr std::size_t kFrameHeaderBytes = 5;
inline constexpr std::uint32_t kMaxPayloadBytes = 0xffffffffu;

std::string encode_frame(const Frame& frame);

// Incremental decoder: feed arbitrary byte fragments, pop complete frames.
// The tag is validated as soon as it arrives.
class FrameDecoder {
 public:
  explicit FrameDecoder(std::uint64_t max_payload = kMaxPayloadBytes) : max_payload_(max_payload) {}

  void feed(std::string_view bytes);
  std::optional<Frame> next();
  // Bytes of an incomplete frame still buffered.
  std::size_t pending() const { return buffer_.size() - offset_; }

 private:
  std::uint64_t max_payload_;
  std::string buffer_;
  std::size_t offset_ = 0;
  std::deque<Frame> ready_;
};

// ACQUIRE: i32 round. A round is one pass over all buckets
// (epoch * bucket_passes_per_epoch + pass).
struct AcquireMsg {
  int round = 0;
};
// GRANT: i32 src, i32 dst, i32 round.
struct GrantMsg {
  BucketId bucket;
  int round = 0;
};
// NONE_AVAILABLE: u8 round_complete, u32 retry_after_ms.
struct NoneAvailableMsg {
  bool round_complete = false;
  std::uint32_t retry_after_ms = 0;
};
// RELEASE: u8 has_bucket, [i32 src, i32 dst], u32 n, i32 partitions[n].
// A present bucket is marked complete; the listed partitions are unlocked.
struct ReleaseMsg {
  std::optional<BucketId> completed;
  std::vector<int> unlock;
};
// ACK: u64 value (message specific, usually 0).
struct AckMsg {
  std::uint64_t value = 0;
};
// EPOCH_BARRIER: i32 barrier id, u32 participants. Answered with ACK once
// `participants` trainers (less those that disconnected) reached the id.
struct BarrierMsg {
  int id = 0;
  std::uint32_t participants = 1;
};

struct PartKey {
  int entity_type = 0;
  int partition = 0;
  auto operator<=>(const PartKey&) const = default;
};
// PART_GET: i32 type, i32 partition, u8 snapshot. A snapshot read does not
// take ownership in the overlap detector.
struct PartGetMsg {
  PartKey key;
  bool snapshot = false;
};
// PART_PUT: i32 type, i32 partition, blob (rest of payload, embedding file layout).
struct PartPutMsg {
  PartKey key;
  std::string blob;
};
// PART_DATA: u8 found, blob (rest of payload; empty when not found).
struct PartDataMsg {
  bool found = false;
  std::string blob;
};

enum class ParamKind : std::uint8_t { relation = 0, entity_block = 1 };
// relation: a = relation index, b = 0 forward / 1 reciprocal.
// entity_block: a = entity type, b = block index of kEntityBlockRows rows.
struct ParamKey {
  ParamKind kind = ParamKind::relation;
  int a = 0;
  int b = 0;
  auto operator<=>(const ParamKey&) const = default;
};
inline constexpr std::int64_t kEntityBlockRows = 4096;

// PARAM_FETCH: u8 with_accumulators, u32 n, keys[n] (u8 kind, i32 a, i32 b).
struct ParamFetchMsg {
  std::vector<ParamKey> keys;
  bool with_accumulators = false;
};
// PARAM_VALUES: u32 n, then per key: key, u64 version, u32 nv, f32 values[nv],
// u32 na, f32 accumulators[na] (na = 0 unless requested).
struct ParamBlock {
  ParamKey key;
  std::uint64_t version = 0;
  std::vector<float> values;
  std::vector<float> accumulators;
};
struct ParamValuesMsg {
  std::vector<ParamBlock> blocks;
};
// PARAM_PUSH_ACC: u32 n, then per entry: key, u32 rows, u32 width, then per
// row: u32 row, f32 grad[width]. Relation entries carry one row 0 spanning
// all parameters; entity entries carry rows relative to the block start.
struct ParamPushEntry {
  ParamKey key;
  std::uint32_t width = 0;
  std::vector<std::uint32_t> rows;
  std::vector<float> grads;  // rows.size() * width
};
struct ParamPushMsg {
  std::vector<ParamPushEntry> entries;
};

Frame encode(const AcquireMsg& m);
Frame encode(const GrantMsg& m);
Frame encode(const NoneAvailableMsg& m);
Frame encode(const ReleaseMsg& m);
Frame encode(const AckMsg& m);
Frame encode(const BarrierMsg& m);
Frame encode(const PartGetMsg& m);
Frame encode(const PartPutMsg& m);
Frame encode(const PartDataMsg& m);
Frame encode(const ParamFetchMsg& m);
Frame encode(const ParamValuesMsg& m);
Frame encode(const ParamPushMsg& m);

// Decoders check the tag and that the payload is consumed exactly.
AcquireMsg decode_acquire(const Frame& f);
GrantMsg decode_grant(const Frame& f);
NoneAvailableMsg decode_none_available(const Frame& f);
ReleaseMsg decode_release(const Frame& f);
AckMsg decode_ack(const Frame& f);
BarrierMsg decode_barrier(const Frame& f);
PartGetMsg decode_part_get(const Frame& f);
PartPutMsg decode_part_put(const Frame& f);
PartDataMsg decode_part_data(const Frame& f);
ParamFetchMsg decode_param_fetch(const Frame& f);
ParamValuesMsg decode_param_values(const Frame& f);
ParamPushMsg decode_param_push(const Frame& f);

}  // namespace gfe
