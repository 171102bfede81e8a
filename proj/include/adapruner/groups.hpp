#pragma once

#include "adapruner/model.hpp"

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace adapruner {

enum class GroupKind { attention_head, mlp_channel };
const char* group_kind_name(GroupKind kind);

enum class SliceAxis { column, row };

// A contiguous band of one projection matrix in the group's layer.
struct Slice {
  Projection projection;
  SliceAxis axis;
  int begin;
  int end;
  bool operator==(const Slice&) const = default;
};

// Coupled weights that must be removed together. A head owns its columns of
// W_Q, W_K, W_V and the matching rows of W_O; a channel owns one column of
// W_up and one row of W_down.
struct StructureGroup {
  int id = 0;
  int layer = 0;
  GroupKind kind = GroupKind::attention_head;
  int unit = 0;  // head or channel index within the layer's current shape
  std::vector<Slice> slices;
  std::int64_t size = 0;
  bool operator==(const StructureGroup&) const = default;
};

// Heads then channels for each prunable layer in order; ids are dense.
std::vector<StructureGroup> build_groups(const TransformerLM& model);

// Block of the layer's weight covered by a slice.
inline auto slice_block(Matrix& m, const Slice& s) {
  return s.axis == SliceAxis::column
             ? m.block(0, s.begin, m.rows(), s.end - s.begin)
             : m.block(s.begin, 0, s.end - s.begin, m.cols());
}
inline auto slice_block(const Matrix& m, const Slice& s) {
  return s.axis == SliceAxis::column
             ? m.block(0, s.begin, m.rows(), s.end - s.begin)
             : m.block(s.begin, 0, s.end - s.begin, m.cols());
}

// Throws ConfigError when the group does not describe the model's current
// structure (e.g. it was built against a differently pruned model).
void check_group(const TransformerLM& model, const StructureGroup& group);

// Copy of the model with every slice of the group(s) set to zero.
TransformerLM zero_group(const TransformerLM& model, const StructureGroup& group);
TransformerLM zero_groups(const TransformerLM& model, std::span<const StructureGroup> groups);

// Line-oriented "id kind layer size" audit format.
void write_groups(std::ostream& out, std::span<const StructureGroup> groups);

struct GroupRecord {
  int id;
  GroupKind kind;
  int layer;
  std::int64_t size;
  bool operator==(const GroupRecord&) const = default;
};
std::vector<GroupRecord> read_groups(std::istream& in);

}  // namespace adapruner
