#pragma once

#include <string>
#include <vector>

#include "muldef/network.hpp"

namespace muldef {

/// Named layer stacks:
///   mnist-desk   two 16-filter stride-2 convs + 128-unit dense head
///   mnist-full   three 64-filter convs + dense output
///   cifar-full   four 64/128-filter convs with pooling, dropout and two
///                l2-regularized 256-unit dense layers
///   mnist-mlp    784-200-200-10, the default black-box substitute
///   cifar-mlp    3072-200-200-10
/// Throws ArgumentError for unknown names.
NetworkSpec named_architecture(const std::string& name);
std::vector<std::string> architecture_names();

}  // namespace muldef
