#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fsdet/loss_ops.hpp"

namespace fsdet::gcl {

using ad::Var;

struct GclConfig {
    double lambda_placeholder = 0.1;
    double lambda_regularization = 1e-4;
    double cosine_scale = 20.0;
    std::int64_t placeholders = 8;  // R

    void validate() const;
};

// Classifier node bookkeeping: node 0 is background, nodes 1..B the base
// classes, nodes B+1..B+R the placeholders. Activation binds novel classes
// to placeholder slots in sorted class-name order; unbound placeholders stay
// masked out of the softmax.
struct ClassifierLayout {
    std::vector<std::string> base_classes;   // sorted
    std::vector<std::string> novel_classes;  // sorted; empty until activation
    std::int64_t placeholders = 0;           // R

    static ClassifierLayout make(std::vector<std::string> base_classes, std::int64_t placeholders);

    std::int64_t background_node() const { return 0; }
    std::int64_t num_base() const { return static_cast<std::int64_t>(base_classes.size()); }
    std::int64_t base_node(std::int64_t i) const { return 1 + i; }
    std::int64_t placeholder_node(std::int64_t slot) const { return 1 + num_base() + slot; }
    std::int64_t total_nodes() const { return 1 + num_base() + placeholders; }
    bool activated() const { return !novel_classes.empty(); }
    std::int64_t num_bound() const { return static_cast<std::int64_t>(novel_classes.size()); }

    bool is_base_node(std::int64_t node) const { return node >= 1 && node <= num_base(); }
    bool is_placeholder_node(std::int64_t node) const {
        return node > num_base() && node < total_nodes();
    }
    bool is_bound_node(std::int64_t node) const {
        return is_placeholder_node(node) && node - num_base() - 1 < num_bound();
    }

    // Node index for a class name (base or bound novel). Throws on unknown
    // or unbound names.
    std::int64_t node_for_class(const std::string& name) const;
    std::string class_for_node(std::int64_t node) const;

    std::vector<std::int64_t> placeholder_nodes() const;
    std::vector<std::int64_t> unbound_placeholder_nodes() const;
    // Softmax support: bg + base (+ bound placeholders when activated).
    std::vector<std::int64_t> active_nodes() const;
};

// Binds novel classes to placeholder slots deterministically (sorted
// class-name order). Idempotent for the same class list; |novel| > R is an
// error instructing a larger R.
ClassifierLayout activate_placeholders(const ClassifierLayout& layout,
                                       std::vector<std::string> novel_classes);

// Loss value plus named components. `components` holds the weighted
// contributions, so `total` equals their plain sum.
struct GclLoss {
    Var total;
    std::map<std::string, Var> components;
};

struct LossBreakdown {
    std::map<std::string, double> components;
    double total = 0.0;

    double reconstructed() const {
        double acc = 0.0;
        for (const auto& [_, v] : components) acc += v;
        return acc;
    }
};

// Base-phase loss: CE over {bg + base} (placeholders masked out of the
// softmax) + lambda_placeholder * mean |placeholder logit|. Labels are node
// indices and must reference bg or base nodes only.
GclLoss gcl_base_loss(const Var& logits, const std::vector<std::int64_t>& labels,
                      const ClassifierLayout& layout, const GclConfig& cfg);

// Fine-tune loss: mean CE over base-labeled rows + mean CE over
// novel-labeled rows (joint softmax over bg + base + bound placeholders) +
// lambda_regularization * sum of squared classifier weights. Unbound
// placeholders stay masked and keep their L1 term.
GclLoss gcl_finetune_loss(const Var& logits, const std::vector<std::int64_t>& labels,
                          const ClassifierLayout& layout, const GclConfig& cfg,
                          const Var& classifier_weights);

}  // namespace fsdet::gcl
