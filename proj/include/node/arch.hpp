#pragma once

#include <node/arch/config.hpp>
#include <node/arch/inference.hpp>
#include <node/arch/model.hpp>
#include <node/arch/network.hpp>
#include <node/arch/training.hpp>
