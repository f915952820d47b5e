#pragma once

#include <node/autograd/adam.hpp>
#include <node/autograd/checkpoint.hpp>
#include <node/autograd/grad_check.hpp>
#include <node/autograd/ops.hpp>
#include <node/autograd/tensor.hpp>
