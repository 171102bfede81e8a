#include "adapruner/groups.hpp"

#include "adapruner/common.hpp"

#include <istream>
#include <ostream>
#include <sstream>

namespace adapruner {

const char* group_kind_name(GroupKind kind) {
  return kind == GroupKind::attention_head ? "attention_head" : "mlp_channel";
}

std::vector<StructureGroup> build_groups(const TransformerLM& model) {
  const auto& c = model.config;
  const int hd = c.head_dim();
  std::vector<StructureGroup> groups;
  for (int l = c.prune_begin; l < c.prune_end; ++l) {
    for (int h = 0; h < model.heads(l); ++h) {
      StructureGroup g;
      g.id = static_cast<int>(groups.size());
      g.layer = l;
      g.kind = GroupKind::attention_head;
      g.unit = h;
      const int b = h * hd;
      const int e = b + hd;
      g.slices = {{Projection::query, SliceAxis::column, b, e},
                  {Projection::key, SliceAxis::column, b, e},
                  {Projection::value, SliceAxis::column, b, e},
                  {Projection::output, SliceAxis::row, b, e}};
      g.size = 4LL * c.d_model * hd;
      groups.push_back(std::move(g));
    }
    for (int ch = 0; ch < model.ff(l); ++ch) {
      StructureGroup g;
      g.id = static_cast<int>(groups.size());
      g.layer = l;
      g.kind = GroupKind::mlp_channel;
      g.unit = ch;
      g.slices = {{Projection::up, SliceAxis::column, ch, ch + 1},
                  {Projection::down, SliceAxis::row, ch, ch + 1}};
      g.size = 2LL * c.d_model;
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

void check_group(const TransformerLM& model, const StructureGroup& group) {
  const auto current = build_groups(model);
  if (group.id < 0 || static_cast<std::size_t>(group.id) >= current.size() ||
      !(current[group.id] == group)) {
    throw ConfigError("stale group id " + std::to_string(group.id) +
                      ": it does not match the model's current structure");
  }
}

TransformerLM zero_groups(const TransformerLM& model, std::span<const StructureGroup> groups) {
  for (const auto& g : groups) check_group(model, g);
  TransformerLM out = model;
  for (const auto& g : groups) {
    auto& layer = out.params.layers[g.layer];
    for (const auto& s : g.slices) slice_block(layer.weight(s.projection), s).setZero();
  }
  return out;
}

TransformerLM zero_group(const TransformerLM& model, const StructureGroup& group) {
  return zero_groups(model, std::span<const StructureGroup>(&group, 1));
}

void write_groups(std::ostream& out, std::span<const StructureGroup> groups) {
  for (const auto& g : groups) {
    out << g.id << ' ' << group_kind_name(g.kind) << ' ' << g.layer << ' ' << g.size << '\n';
  }
}

std::vector<GroupRecord> read_groups(std::istream& in) {
  std::vector<GroupRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream fields(line);
    GroupRecord rec{};
    std::string kind;
    if (!(fields >> rec.id >> kind >> rec.layer >> rec.size) || !(fields >> std::ws).eof()) {
      throw ConfigError("malformed group line " + std::to_string(line_no) + ": " + line);
    }
    if (kind == "attention_head") {
      rec.kind = GroupKind::attention_head;
    } else if (kind == "mlp_channel") {
      rec.kind = GroupKind::mlp_channel;
    } else {
      throw ConfigError("unknown group kind '" + kind + "' on line " + std::to_string(line_no));
    }
    out.push_back(rec);
  }
  return out;
}

}  // namespace adapruner
