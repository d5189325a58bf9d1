#include "fsdet/gcl.hpp"

#include <algorithm>

namespace fsdet::gcl {

using namespace fsdet::nn;

void GclConfig::validate() const {
    if (lambda_placeholder < 0.0 || lambda_regularization < 0.0 || cosine_scale <= 0.0 ||
        placeholders < 0) {
        throw ConfigError("gcl: coefficients must be nonnegative and cosine_scale positive");
    }
}

ClassifierLayout ClassifierLayout::make(std::vector<std::string> base_classes,
                                        std::int64_t placeholders) {
    std::sort(base_classes.begin(), base_classes.end());
    if (std::adjacent_find(base_classes.begin(), base_classes.end()) != base_classes.end()) {
        throw ConfigError("classifier layout: duplicate base class name");
    }
    ClassifierLayout l;
    l.base_classes = std::move(base_classes);
    l.placeholders = placeholders;
    return l;
}

std::int64_t ClassifierLayout::node_for_class(const std::string& name) const {
    for (std::size_t i = 0; i < base_classes.size(); ++i) {
        if (base_classes[i] == name) return base_node(static_cast<std::int64_t>(i));
    }
    for (std::size_t i = 0; i < novel_classes.size(); ++i) {
        if (novel_classes[i] == name) return placeholder_node(static_cast<std::int64_t>(i));
    }
    throw DataError("classifier layout: class '" + name + "' is not bound to any node");
}

std::string ClassifierLayout::class_for_node(std::int64_t node) const {
    if (node == background_node()) return "__background__";
    if (is_base_node(node)) return base_classes[static_cast<std::size_t>(node - 1)];
    if (is_bound_node(node)) {
        return novel_classes[static_cast<std::size_t>(node - num_base() - 1)];
    }
    throw DataError("classifier layout: node " + std::to_string(node) + " has no class");
}

std::vector<std::int64_t> ClassifierLayout::placeholder_nodes() const {
    std::vector<std::int64_t> nodes;
    for (std::int64_t s = 0; s < placeholders; ++s) nodes.push_back(placeholder_node(s));
    return nodes;
}

std::vector<std::int64_t> ClassifierLayout::unbound_placeholder_nodes() const {
    std::vector<std::int64_t> nodes;
    for (std::int64_t s = num_bound(); s < placeholders; ++s) nodes.push_back(placeholder_node(s));
    return nodes;
}

std::vector<std::int64_t> ClassifierLayout::active_nodes() const {
    std::vector<std::int64_t> nodes = {background_node()};
    for (std::int64_t i = 0; i < num_base(); ++i) nodes.push_back(base_node(i));
    for (std::int64_t s = 0; s < num_bound(); ++s) nodes.push_back(placeholder_node(s));
    return nodes;
}

ClassifierLayout activate_placeholders(const ClassifierLayout& layout,
                                       std::vector<std::string> novel_classes) {
    std::sort(novel_classes.begin(), novel_classes.end());
    novel_classes.erase(std::unique(novel_classes.begin(), novel_classes.end()),
                        novel_classes.end());
    if (layout.activated()) {
        if (layout.novel_classes == novel_classes) return layout;  // idempotent
        throw ProtocolError("activate_placeholders: layout already bound to a different class list");
    }
    if (static_cast<std::int64_t>(novel_classes.size()) > layout.placeholders) {
        throw ConfigError("activate_placeholders: " + std::to_string(novel_classes.size()) +
                          " novel classes exceed the " + std::to_string(layout.placeholders) +
                          " reserved placeholder nodes; configure a larger placeholder count");
    }
    for (const auto& n : novel_classes) {
        if (std::find(layout.base_classes.begin(), layout.base_classes.end(), n) !=
            layout.base_classes.end()) {
            throw DataError("activate_placeholders: class '" + n + "' is already a base class");
        }
    }
    ClassifierLayout out = layout;
    out.novel_classes = std::move(novel_classes);
    return out;
}

GclLoss gcl_base_loss(const Var& logits, const std::vector<std::int64_t>& labels,
                      const ClassifierLayout& layout, const GclConfig& cfg) {
    cfg.validate();
    const auto& s = logits.val().shape();
    if (s.size() != 2 || s[1] != layout.total_nodes()) {
        throw ShapeError("gcl_base_loss: logits " + logits.val().shape_str() + " vs " +
                         std::to_string(layout.total_nodes()) + " classifier nodes");
    }
    std::vector<std::int64_t> active = {layout.background_node()};
    for (std::int64_t i = 0; i < layout.num_base(); ++i) active.push_back(layout.base_node(i));

    std::vector<std::int64_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::int64_t label = labels[i];
        if (label != layout.background_node() && !layout.is_base_node(label)) {
            throw DataError("gcl_base_loss: label node " + std::to_string(label) +
                            " is not a background/base node (placeholder or novel label in the base"
                            " phase)");
        }
        rows.push_back(static_cast<std::int64_t>(i));
    }
    if (rows.empty()) throw DataError("gcl_base_loss: empty batch");

    GclLoss out;
    const Var ce = mean(masked_ce_rows(logits, active, labels, rows));
    out.components["base_ce"] = ce;
    if (layout.placeholders > 0 && cfg.lambda_placeholder > 0.0) {
        out.components["placeholder_l1"] =
            scale(l1_mean_cols(logits, layout.placeholder_nodes()), cfg.lambda_placeholder);
    }
    std::vector<Var> terms;
    for (const auto& [_, v] : out.components) terms.push_back(v);
    out.total = add_scalars(terms);
    return out;
}

GclLoss gcl_finetune_loss(const Var& logits, const std::vector<std::int64_t>& labels,
                          const ClassifierLayout& layout, const GclConfig& cfg,
                          const Var& classifier_weights) {
    cfg.validate();
    if (!layout.activated()) {
        throw ProtocolError("gcl_finetune_loss: layout has no activated placeholders");
    }
    const auto& s = logits.val().shape();
    if (s.size() != 2 || s[1] != layout.total_nodes()) {
        throw ShapeError("gcl_finetune_loss: logits " + logits.val().shape_str() + " vs " +
                         std::to_string(layout.total_nodes()) + " classifier nodes");
    }
    const std::vector<std::int64_t> active = layout.active_nodes();

    std::vector<std::int64_t> base_rows, novel_rows;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::int64_t label = labels[i];
        if (label == layout.background_node() || layout.is_base_node(label)) {
            base_rows.push_back(static_cast<std::int64_t>(i));
        } else if (layout.is_bound_node(label)) {
            novel_rows.push_back(static_cast<std::int64_t>(i));
        } else {
            throw DataError("gcl_finetune_loss: label node " + std::to_string(label) +
                            " references a masked (unbound) placeholder");
        }
    }

    GclLoss out;
    if (!base_rows.empty()) {
        out.components["base_ce"] = mean(masked_ce_rows(logits, active, labels, base_rows));
    }
    if (!novel_rows.empty()) {
        out.components["novel_ce"] = mean(masked_ce_rows(logits, active, labels, novel_rows));
    }
    if (cfg.lambda_regularization > 0.0) {
        out.components["l2_reg"] =
            scale(sum_squares(classifier_weights), cfg.lambda_regularization);
    }
    const std::vector<std::int64_t> unbound = layout.unbound_placeholder_nodes();
    if (!unbound.empty() && cfg.lambda_placeholder > 0.0) {
        out.components["placeholder_l1"] =
            scale(l1_mean_cols(logits, unbound), cfg.lambda_placeholder);
    }
    std::vector<Var> terms;
    for (const auto& [_, v] : out.components) terms.push_back(v);
    out.total = terms.empty() ? ad::Var::constant(Tensor({1})) : add_scalars(terms);
    return out;
}

}  // namespace fsdet::gcl
