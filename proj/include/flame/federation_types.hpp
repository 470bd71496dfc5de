#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "flame/moe_model.hpp"

namespace flame {

/// Server-held LoRA adapters, one pair per expert.
struct GlobalState {
  std::vector<LoraPair> loras;
  std::size_t round_index = 0;

  std::size_t expert_count() const noexcept { return loras.size(); }
  std::size_t rank() const noexcept { return loras.empty() ? 0 : loras.front().rank(); }

  bool all_finite() const {
    for (const auto& l : loras)
      if (!l.a.all_finite() || !l.b.all_finite()) return false;
    return true;
  }

  friend bool operator==(const GlobalState&, const GlobalState&) = default;

  static GlobalState from_model(const ToyModel& model) { return GlobalState{model.smoe.loras, 0}; }
};

/// What a client sends back after a local training pass.
struct ClientUpdate {
  std::size_t client_id = 0;
  std::vector<LoraPair> loras;
  ActivationCounter activation;
  std::size_t dataset_size = 0;
  double rescaler = 1.0;
  double initial_loss = 0.0;  // mean training loss over the first epoch's first step
  double mean_loss = 0.0;     // mean training loss over all steps

  friend bool operator==(const ClientUpdate&, const ClientUpdate&) = default;
};

}  // namespace flame
